"""Transfer fine-tuning of a miniature transformer encoder with phrasal
and sentential paraphrase relation injection."""

__version__ = "0.1.0"

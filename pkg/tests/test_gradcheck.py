from parainject import gradcheck as gc


def test_primitive_gradchecks_tight():
    errors = gc.primitive_gradchecks(seed=0)
    assert len(errors) == 20
    for name, err in errors.items():
        assert err < 1e-5, (name, err)


def test_joint_loss_gradcheck_small_model():
    # smaller than the CLI default so the unit suite stays fast
    err = gc.joint_loss_gradcheck(seed=0, layers=1, hidden=16,
                                  samples_per_param=2)
    assert err < 1e-3


def test_corrupted_adjoint_is_detected():
    assert gc.corrupted_adjoint_error(seed=0) > 1e-1


def test_run_suite_keys():
    result = gc.run_suite(seed=1)
    assert result["max_error"] >= result["max_primitive_error"]
    assert result["max_error"] >= result["joint_loss_error"] or \
        result["max_error"] >= result["max_primitive_error"]
    assert result["corrupted_control_error"] > 1e-1

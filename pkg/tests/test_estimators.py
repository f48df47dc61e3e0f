import numpy as np
import pytest

from dynrecon.estimators import (BaselineReconstructor, DiffusionAwareRefiner,
                                 NotFittedError)
from dynrecon.optimize import Schedule
from dynrecon.render import RenderSettings
from dynrecon.synthgen import SynthSpec, generate_scene, render_dataset


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("est_ds")
    spec = SynthSpec(n_frames=8, image_size=16, n_static=40, n_dynamic=12,
                     n_test=2, n_knots=4)
    render_dataset(generate_scene(spec), root,
                   settings=RenderSettings(16, 16), spec=spec)
    return root


def test_get_set_params():
    est = BaselineReconstructor(n_static=123)
    params = est.get_params()
    assert params["n_static"] == 123
    est.set_params(n_dynamic=45)
    assert est.n_dynamic == 45
    with pytest.raises(ValueError):
        est.set_params(not_a_param=1)


def test_predict_before_fit_raises():
    from dynrecon.camera import Pose, Trajectory
    from conftest import small_intrinsics
    traj = Trajectory([Pose(np.array([1.0, 0, 0, 0]), np.array([0, 0, -3.0]))],
                      small_intrinsics())
    with pytest.raises(NotFittedError):
        BaselineReconstructor().predict(traj)
    with pytest.raises(NotFittedError):
        DiffusionAwareRefiner().predict(traj)


def test_fit_predict_round(tiny_dataset):
    est = BaselineReconstructor(n_static=150, n_dynamic=60, n_knots=4,
                                iters=15, seed=0)
    est.fit(str(tiny_dataset))
    assert est.scene_ is not None
    from dynrecon.synthgen import load_dataset
    ds = load_dataset(tiny_dataset)
    imgs = est.predict(ds.test, times=ds.test_times)
    assert len(imgs) == 2
    assert imgs[0].shape == (16, 16, 3)
    assert np.all(np.isfinite(imgs[0]))


def test_refiner_requires_fitted_baseline(tiny_dataset):
    with pytest.raises(NotFittedError):
        DiffusionAwareRefiner().fit(BaselineReconstructor(), str(tiny_dataset),
                                    [], None)


def test_refiner_fit(tiny_dataset, tmp_path):
    from dynrecon.camera import sample_training_cameras
    from dynrecon.enhance import EnhancerConfig, build_pseudo_dataset
    from dynrecon.synthgen import load_dataset
    base = BaselineReconstructor(n_static=150, n_dynamic=60, n_knots=4,
                                 iters=10, seed=0).fit(str(tiny_dataset))
    ds = load_dataset(tiny_dataset)
    sampled = sample_training_cameras(base.input_trajectory_, seed=0)
    records = build_pseudo_dataset(base.scene_, sampled, base._fit_settings,
                                   EnhancerConfig(mode="blind", strength_k=2),
                                   tmp_path / "pseudo")
    ref = DiffusionAwareRefiner(iters=5, schedule=Schedule(seed=0))
    ref.fit(base, ds, records, sampled)
    imgs = ref.predict(ds.test, times=ds.test_times)
    assert len(imgs) == 2 and np.all(np.isfinite(imgs[0]))

"""Estimator-style wrappers so the pipeline composes with sklearn tooling.

`fit` consumes a dataset directory (or a loaded Dataset) and trains the
scene; `predict` renders images for a trajectory. Parameters follow the
sklearn get_params/set_params convention.
"""

from __future__ import annotations

import numpy as np

from . import optimize, synthgen
from .camera import Trajectory, sample_training_cameras
from .config import RunConfig, SeedingConfig
from .enhance import EnhancerConfig, build_pseudo_dataset
from .losses import LossWeights
from .optimize import Schedule
from .render import RenderSettings, render
from .scene import Scene, deform_at_time, seed_from_depth


class NotFittedError(RuntimeError):
    pass


class _ParamsMixin:
    _param_names: tuple = ()

    def get_params(self, deep=True):
        return {name: getattr(self, name) for name in self._param_names}

    def set_params(self, **params):
        for name, value in params.items():
            if name not in self._param_names:
                raise ValueError(f"unknown parameter {name!r}")
            setattr(self, name, value)
        return self


def _as_dataset(X):
    if isinstance(X, synthgen.Dataset):
        return X
    return synthgen.load_dataset(X)


class BaselineReconstructor(_ParamsMixin):
    """Phase-1 monocular trainer: video frames in, 4D Gaussian scene out."""

    _param_names = ("n_static", "n_dynamic", "n_knots", "iters", "seed",
                    "schedule", "loss_weights", "render_settings")

    def __init__(self, n_static=2000, n_dynamic=500, n_knots=8, iters=None,
                 seed=0, schedule=None, loss_weights=None, render_settings=None):
        self.n_static = n_static
        self.n_dynamic = n_dynamic
        self.n_knots = n_knots
        self.iters = iters
        self.seed = seed
        self.schedule = schedule
        self.loss_weights = loss_weights
        self.render_settings = render_settings
        self.scene_ = None
        self.input_trajectory_ = None

    def _settings(self, dataset):
        if self.render_settings is not None:
            return self.render_settings
        intr = dataset.train.intrinsics
        return RenderSettings(intr.width, intr.height)

    def fit(self, X, y=None):
        dataset = _as_dataset(X)
        schedule = self.schedule or Schedule(seed=self.seed)
        scene = seed_from_depth(
            dataset.frames, dataset.depths, dataset.dyn_masks, dataset.train,
            self.n_static, self.n_dynamic, self.seed, n_knots=self.n_knots,
        )
        self.scene_, self.input_trajectory_, _ = optimize.train_baseline(
            scene, dataset.frames, dataset.train, schedule,
            self._settings(dataset), self.loss_weights, iters=self.iters,
        )
        self._fit_settings = self._settings(dataset)
        return self

    def predict(self, trajectory: Trajectory, times=None):
        """Render one image per pose; times defaults to 0..len-1 clamped."""
        if self.scene_ is None:
            raise NotFittedError("call fit before predict")
        T = self.scene_.n_frames
        if times is None:
            times = np.clip(np.arange(len(trajectory)), 0, T - 1)
        images = []
        for pose, t in zip(trajectory.poses, times):
            posed = deform_at_time(self.scene_, float(t))
            images.append(render(posed, pose, trajectory.intrinsics,
                                 self._fit_settings, with_ctx=False).color)
        return images


class DiffusionAwareRefiner(_ParamsMixin):
    """Phase-2 refiner: consumes a fitted baseline plus a pseudo dataset."""

    _param_names = ("use_dr", "use_so", "iters", "seed", "schedule",
                    "loss_weights")

    def __init__(self, use_dr=True, use_so=True, iters=None, seed=0,
                 schedule=None, loss_weights=None):
        self.use_dr = use_dr
        self.use_so = use_so
        self.iters = iters
        self.seed = seed
        self.schedule = schedule
        self.loss_weights = loss_weights
        self.scene_ = None

    def fit(self, baseline: BaselineReconstructor, dataset, records,
            sampled: Trajectory):
        if baseline.scene_ is None:
            raise NotFittedError("baseline must be fitted first")
        dataset = _as_dataset(dataset)
        schedule = self.schedule or Schedule(seed=self.seed)
        self.scene_, self.input_trajectory_, self.sampled_trajectory_ = \
            optimize.refine_diffusion_aware(
                baseline.scene_, dataset.frames, baseline.input_trajectory_,
                records, sampled, schedule, baseline._fit_settings,
                self.loss_weights, use_dr=self.use_dr, use_so=self.use_so,
                iters=self.iters,
            )
        self._fit_settings = baseline._fit_settings
        return self

    def predict(self, trajectory: Trajectory, times=None):
        if self.scene_ is None:
            raise NotFittedError("call fit before predict")
        T = self.scene_.n_frames
        if times is None:
            times = np.clip(np.arange(len(trajectory)), 0, T - 1)
        images = []
        for pose, t in zip(trajectory.poses, times):
            posed = deform_at_time(self.scene_, float(t))
            images.append(render(posed, pose, trajectory.intrinsics,
                                 self._fit_settings, with_ctx=False).color)
        return images

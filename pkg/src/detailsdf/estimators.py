"""Estimator-style wrappers around the two training stages.

These follow the scikit-learn conventions: hyperparameters are plain
constructor arguments (so ``get_params``/``set_params``/``clone`` work),
learned state lives in trailing-underscore attributes set by ``fit``,
and query methods validate their input with ``check_array``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .fields import PosEncodingConfig, RadianceField, SdfField, normals_numpy
from .meshsdf import MeshSdf, TriMesh, load_obj
from .optimize import CoarseConfig, DetailConfig, run_coarse, run_detail
from .render import Camera, RenderResult, TraceConfig, render_image


def _points(X) -> np.ndarray:
    X = check_array(X, dtype=np.float64, ensure_2d=True)
    if X.shape[1] != 3:
        raise ValueError(f"expected points of shape (n, 3), got {X.shape}")
    return X


def _as_mesh(mesh) -> TriMesh:
    if isinstance(mesh, TriMesh):
        return mesh
    if isinstance(mesh, (tuple, list)) and len(mesh) == 2:
        return TriMesh(np.asarray(mesh[0], dtype=np.float64), np.asarray(mesh[1], dtype=np.int64))
    return load_obj(mesh)


class SdfDistiller(RegressorMixin, BaseEstimator):
    """Fit a neural SDF to the thickened distance field of a triangle mesh.

    ``fit`` takes a :class:`TriMesh`, a ``(vertices, faces)`` pair or an OBJ
    path. ``predict`` returns signed distances, ``transform`` the geometry
    feature vectors.
    """

    def __init__(
        self,
        width=128,
        depth=8,
        skip_at=4,
        feature_dim=16,
        num_freqs=6,
        eps=0.02,
        epochs=1000,
        points_per_epoch=4096,
        batch_size=256,
        lr=1e-3,
        lr_final=1e-5,
        lambda_eik=0.1,
        seed=0,
    ):
        self.width = width
        self.depth = depth
        self.skip_at = skip_at
        self.feature_dim = feature_dim
        self.num_freqs = num_freqs
        self.eps = eps
        self.epochs = epochs
        self.points_per_epoch = points_per_epoch
        self.batch_size = batch_size
        self.lr = lr
        self.lr_final = lr_final
        self.lambda_eik = lambda_eik
        self.seed = seed

    def _build(self) -> SdfField:
        return SdfField(
            enc=PosEncodingConfig(num_freqs_x=self.num_freqs),
            width=self.width,
            depth=self.depth,
            skip_at=self.skip_at,
            feature_dim=self.feature_dim,
            seed=self.seed,
        )

    def fit(self, X, y=None):
        mesh = _as_mesh(X)
        self.mesh_sdf_ = MeshSdf(mesh, eps=self.eps)
        self.field_ = self._build()
        cfg = CoarseConfig(
            epochs=self.epochs,
            points_per_epoch=self.points_per_epoch,
            batch_size=self.batch_size,
            eps=self.eps,
            lambda_eik=self.lambda_eik,
            lr=self.lr,
            lr_final=self.lr_final,
            seed=self.seed,
        )
        self.report_ = run_coarse(self.field_, self.mesh_sdf_, cfg)
        self.n_features_in_ = 3
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "field_")
        return self.field_.sdf(_points(X))

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "field_")
        _, feat = self.field_.evaluate(_points(X))
        return feat.data

    def normals(self, X) -> np.ndarray:
        check_is_fitted(self, "field_")
        return normals_numpy(self.field_, _points(X))

    def score(self, X, y=None, sample_weight=None) -> float:
        """Negative mean absolute error against the shell SDF (or ``y``)."""
        check_is_fitted(self, "field_")
        X = _points(X)
        target = self.mesh_sdf_(X) if y is None else np.asarray(y, dtype=np.float64).ravel()
        err = np.abs(self.predict(X) - target)
        return -float(np.average(err, weights=sample_weight))


class DetailRefiner(BaseEstimator):
    """Refine a distilled SDF so its rendering matches a single image.

    ``fit(image, mask, camera=...)`` starts from ``prior`` (a fitted
    :class:`SdfDistiller`); the prior estimator itself is left untouched.
    """

    def __init__(
        self,
        prior=None,
        epochs=250,
        rays_per_step=2048,
        lambda1=1.0,
        lambda2=0.1,
        lr=1e-4,
        ablation=None,
        radiance_width=128,
        patience=20,
        seed=0,
    ):
        self.prior = prior
        self.epochs = epochs
        self.rays_per_step = rays_per_step
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.lr = lr
        self.ablation = ablation
        self.radiance_width = radiance_width
        self.patience = patience
        self.seed = seed

    def fit(self, X, y=None, *, camera: Camera):
        if self.prior is None:
            raise ValueError("DetailRefiner needs a fitted SdfDistiller as prior")
        check_is_fitted(self.prior, "field_")
        image = np.asarray(X, dtype=np.float64)
        if image.ndim != 3 or image.shape[2] != 3:
            raise ValueError(f"image must be (H, W, 3), got {image.shape}")
        if (image.shape[0], image.shape[1]) != (camera.height, camera.width):
            raise ValueError("image size does not match the camera")
        mask = np.ones(image.shape[:2], bool) if y is None else np.asarray(y, dtype=bool)
        if mask.shape != image.shape[:2]:
            raise ValueError("mask size does not match the image")

        src = self.prior.field_
        self.field_ = SdfField(
            enc=src.enc, width=src.width, depth=src.depth, skip_at=src.skip_at,
            feature_dim=src.feature_dim, beta=src.beta, geometric_init=False,
        )
        for dst, s in zip(self.field_.parameters(), src.parameters()):
            dst.data = s.data.copy()
        self.shader_ = RadianceField(
            feature_dim=src.feature_dim, width=self.radiance_width, seed=self.seed + 1,
        )
        cfg = DetailConfig(
            epochs=self.epochs,
            rays_per_step=self.rays_per_step,
            lambda1=self.lambda1,
            lambda2=self.lambda2,
            lr=self.lr,
            ablation=self.ablation,
            patience=self.patience,
            seed=self.seed,
        )
        self.camera_ = camera
        self.report_ = run_detail(self.field_, self.shader_, image, mask, camera, self.prior.mesh_sdf_, cfg)
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "field_")
        return self.field_.sdf(_points(X))

    def render(self, camera: Camera | None = None) -> RenderResult:
        check_is_fitted(self, "field_")
        toggles = DetailConfig(ablation=self.ablation).toggles
        return render_image(self.field_, self.shader_, camera or self.camera_, toggles, TraceConfig())

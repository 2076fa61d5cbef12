"""Adam training loop over pre-rendered view sets with online augmentation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import so3
from ..augment import AugmentConfig, augment
from ..mesh import TriMesh
from ..render import Camera, LightSpec, crop_and_resize, render
from . import autodiff as ad
from .network import MPNetwork, multipath_loss, save_checkpoint


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, curve: list[float]):
        super().__init__(f"loss became non-finite at iteration {iteration}")
        self.iteration = iteration
        self.curve = curve


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 5000
    b_dec: int = 4  # per-decoder sub-batch; encoder batch is n_objects * b_dec
    learning_rate: float | None = None  # default 1e-4 * b_dec
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    checkpoint_interval: int = 0  # iterations between snapshots; 0 = final only

    @property
    def lr(self) -> float:
        return self.learning_rate if self.learning_rate is not None else 1e-4 * self.b_dec


class Adam:
    def __init__(self, params: list[ad.Tensor], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.step_count = 0

    def step(self):
        c = self.cfg
        self.step_count += 1
        t = self.step_count
        # fold both bias corrections into the step size
        alpha = c.lr * np.sqrt(1.0 - c.beta2**t) / (1.0 - c.beta1**t)
        eps = c.eps * np.sqrt(1.0 - c.beta2**t)
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            np.multiply(g, g, out=g)
            g *= 1 - c.beta2
            v += g
            np.sqrt(v, out=g)
            g += eps
            np.divide(m, g, out=g)
            g *= alpha
            p.data -= g

    def state(self) -> dict:
        return {"step": self.step_count, "m": self.m, "v": self.v}

    def load_state(self, state: dict):
        self.step_count = state["step"]
        self.m = [np.asarray(a, dtype=p.data.dtype) for a, p in zip(state["m"], self.params)]
        self.v = [np.asarray(a, dtype=p.data.dtype) for a, p in zip(state["v"], self.params)]


@dataclass
class ViewSet:
    """Pre-rendered training views for one object.

    `inputs` are rendered under randomized lighting (the encoder sees
    augmented versions of these); `targets` are the same poses under fixed
    neutral lighting and are never touched.
    """

    name: str
    orientations: np.ndarray  # (N, 4)
    inputs: np.ndarray  # (N, S, S, 3) float32
    targets: np.ndarray  # (N, S, S, 3) float32
    masks: np.ndarray  # (N, S, S) bool


def render_view_set(
    mesh: TriMesh,
    cam: Camera,
    n_views: int,
    rng: np.random.Generator,
    out_size: int = 64,
    distance_mm: float = 700.0,
    pad: float = 1.2,
    randomize_light: bool = True,
) -> ViewSet:
    """Render `n_views` uniform orientations at a constant distance and crop."""
    t = np.array([0.0, 0.0, distance_mm])
    quats = so3.sample_uniform_rotation(rng, n=n_views)
    inputs = np.empty((n_views, out_size, out_size, 3), dtype=np.float32)
    targets = np.empty_like(inputs)
    masks = np.empty((n_views, out_size, out_size), dtype=bool)
    for i, q in enumerate(quats):
        light = LightSpec.randomized(rng) if randomize_light else LightSpec.neutral()
        view_in = render(mesh, cam, (q, t), light)
        view_tgt = render(mesh, cam, (q, t), LightSpec.neutral())
        crop_tgt = crop_and_resize(view_tgt, out_size, pad=pad)
        crop_in = crop_and_resize(
            view_in, out_size, pad=pad, box=(crop_tgt.center, crop_tgt.side)
        )
        inputs[i] = crop_in.image
        targets[i] = crop_tgt.image
        masks[i] = crop_tgt.mask
    return ViewSet(mesh.name, quats, inputs, targets, masks)


def make_training_pair(
    vs: ViewSet, index: int, aug: AugmentConfig, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """(augmented input, pristine target) for one stored view."""
    x = augment(vs.inputs[index], aug, rng, mask=vs.masks[index])
    return x, vs.targets[index]


@dataclass
class TrainResult:
    curve: np.ndarray  # per-iteration batch loss
    iterations: int


def train(
    net: MPNetwork,
    view_sets: list[ViewSet],
    cfg: TrainConfig,
    aug: AugmentConfig | None = None,
    checkpoint_path: str | None = None,
    adam: Adam | None = None,
    progress: bool = False,
) -> TrainResult:
    """Adam-train the multi-path network on balanced heterogeneous batches."""
    if len(view_sets) != net.arch.n_objects:
        raise ValueError("one view set per decoder is required")
    aug = aug or AugmentConfig()
    rng = np.random.default_rng(cfg.seed)
    adam = adam or Adam(net.params(), cfg)
    size = net.arch.input_size
    n_obj = net.arch.n_objects
    batch = n_obj * cfg.b_dec
    curve = np.empty(cfg.iterations, dtype=np.float64)

    inputs = np.empty((batch, size, size, 3), dtype=np.float32)
    targets = np.empty_like(inputs)
    ids = np.repeat(np.arange(n_obj), cfg.b_dec)

    for it in range(cfg.iterations):
        k = 0
        for j, vs in enumerate(view_sets):
            picks = rng.integers(len(vs.inputs), size=cfg.b_dec)
            for idx in picks:
                inputs[k], targets[k] = make_training_pair(vs, int(idx), aug, rng)
                k += 1
        net.zero_grad()
        loss = multipath_loss(net, inputs, targets, ids)
        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainingDiverged(it, list(curve[:it]))
        loss.backward()
        adam.step()
        curve[it] = value
        if progress and (it % 200 == 0 or it == cfg.iterations - 1):
            print(f"iter {it:6d}  loss {value:9.3f}")
        if (
            checkpoint_path
            and cfg.checkpoint_interval
            and (it + 1) % cfg.checkpoint_interval == 0
        ):
            save_checkpoint(checkpoint_path, net, adam.state())
    if checkpoint_path:
        save_checkpoint(checkpoint_path, net, adam.state())
    return TrainResult(curve=curve, iterations=cfg.iterations)

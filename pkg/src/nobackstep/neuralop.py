"""DeepONet surrogate for the parameter -> kernel maps, written on plain numpy.

The model is

    out(params)(x, xi) = sum_k branch(params / scaling)_k * trunk(x, xi)_k + bias0

with tanh MLPs for both sub-networks.  Training is full-batch (or seeded
mini-batch) Adam on the mean squared error over every (sample, node) pair.
"""
from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DivergenceError, FormatError
from .grid import SpatialGrid, TriangleGrid, TriangleKernelGrid
from .kernels import NEURAL, KernelPair, solve_kernels

log = logging.getLogger(__name__)

MODEL_MAGIC = "DONET1"
DATASET_MAGIC = "KDS1"
KERNEL_NAMES = ("alpha", "beta")
ACTIVATIONS = {"tanh": (np.tanh, lambda y: 1.0 - y * y)}


# ---------------------------------------------------------------- networks

@dataclass
class Layer:
    w: np.ndarray  # (fan_in, fan_out); forward is x @ w + b
    b: np.ndarray


def init_mlp(sizes, rng: np.random.Generator) -> list[Layer]:
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        layers.append(Layer(rng.uniform(-bound, bound, size=(fan_in, fan_out)), np.zeros(fan_out)))
    return layers


def mlp_forward(layers: list[Layer], x: np.ndarray, act=np.tanh) -> list[np.ndarray]:
    """Activations of every layer; the last layer is linear."""
    outs = [x]
    for k, layer in enumerate(layers):
        z = outs[-1] @ layer.w + layer.b
        outs.append(z if k == len(layers) - 1 else act(z))
    return outs


def mlp_backward(layers: list[Layer], outs: list[np.ndarray], grad_out: np.ndarray, dact) -> list[Layer]:
    grads = [None] * len(layers)
    g = grad_out
    for k in range(len(layers) - 1, -1, -1):
        grads[k] = Layer(outs[k].T @ g, g.sum(axis=0))
        if k:
            g = (g @ layers[k].w.T) * dact(outs[k])
    return grads


@dataclass
class DeepONetModel:
    branch: list[Layer]
    trunk: list[Layer]
    bias0: float = 0.0
    kernel: str = "alpha"
    activation: str = "tanh"
    scaling: np.ndarray = field(default_factory=lambda: np.full(4, 4.0))
    dx: float = 0.05
    seed: int = 0
    _basis_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.kernel not in KERNEL_NAMES:
            raise ConfigurationError(f"kernel must be one of {KERNEL_NAMES}, got {self.kernel!r}")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unsupported activation {self.activation!r}")
        self.scaling = np.asarray(self.scaling, dtype=float)
        for net, n_in in ((self.branch, 4), (self.trunk, 2)):
            width = n_in
            for layer in net:
                if layer.w.shape[0] != width or layer.b.shape != (layer.w.shape[1],):
                    raise ConfigurationError("layer shapes do not chain")
                width = layer.w.shape[1]
        if self.branch[-1].w.shape[1] != self.trunk[-1].w.shape[1]:
            raise ConfigurationError("branch and trunk output widths differ")

    @classmethod
    def create(cls, kernel: str, hidden: int = 64, p: int = 64, seed: int = 0,
               scaling=(4.0, 4.0, 4.0, 4.0), dx: float = 0.05) -> "DeepONetModel":
        rng = np.random.default_rng(seed)
        return cls(init_mlp([4, hidden, hidden, p], rng), init_mlp([2, hidden, hidden, p], rng),
                   0.0, kernel, "tanh", np.asarray(scaling, dtype=float), dx, seed)

    @property
    def p(self) -> int:
        return self.branch[-1].w.shape[1]

    @property
    def hidden(self) -> int:
        return self.branch[0].w.shape[1]

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.branch + self.trunk:
            out += [layer.w, layer.b]
        return out

    def branch_out(self, params) -> np.ndarray:
        u = np.atleast_2d(np.asarray(params, dtype=float)) / self.scaling
        return mlp_forward(self.branch, u, ACTIVATIONS[self.activation][0])[-1]

    def trunk_out(self, points) -> np.ndarray:
        return mlp_forward(self.trunk, np.asarray(points, dtype=float), ACTIVATIONS[self.activation][0])[-1]

    def trunk_basis(self, tri: TriangleGrid) -> np.ndarray:
        """Trunk outputs at every node of ``tri``; parameter independent, so cached."""
        key = tri.base.n_points
        basis = self._basis_cache.get(key)
        if basis is None:
            basis = self._basis_cache[key] = self.trunk_out(tri.points)
        return basis

    def invalidate(self):
        self._basis_cache.clear()


def forward(model: DeepONetModel, params, points) -> np.ndarray:
    params = np.asarray(params, dtype=float)
    if params.shape != (4,):
        raise ConfigurationError(f"params must have shape (4,), got {params.shape}")
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if points.shape[1] != 2:
        raise ConfigurationError(f"points must have shape (n, 2), got {points.shape}")
    return model.trunk_out(points) @ model.branch_out(params)[0] + model.bias0


def kernel_grid_from_model(model_alpha: DeepONetModel, model_beta: DeepONetModel, params,
                           tri: TriangleGrid) -> KernelPair:
    out = []
    for model in (model_alpha, model_beta):
        coeff = model.branch_out(params)[0]
        out.append(TriangleKernelGrid(tri, model.trunk_basis(tri) @ coeff + model.bias0))
    return KernelPair(out[0], out[1], NEURAL)


# ---------------------------------------------------------------- dataset

@dataclass
class KernelDataset:
    params: np.ndarray   # (n, 4)
    alpha: np.ndarray    # (n, tri.size)
    beta: np.ndarray
    tri: TriangleGrid
    bounds: tuple
    seed: int
    physics: dict
    split: float = 0.9

    @property
    def n(self) -> int:
        return len(self.params)

    @property
    def n_train(self) -> int:
        return max(1, int(math.floor(self.split * self.n + 1e-9)))

    def target(self, kernel: str) -> np.ndarray:
        return {"alpha": self.alpha, "beta": self.beta}[kernel]


def thread_count() -> int:
    env = os.environ.get("KF_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigurationError(f"KF_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def generate_dataset(n: int, bounds, tri: TriangleGrid, physics, seed: int,
                     workers: int | None = None) -> KernelDataset:
    """Uniform samples in the box ``bounds`` = (lo, hi), each solved numerically."""
    if n < 2:
        raise ConfigurationError(f"need at least 2 samples, got {n}")
    lo, hi = (float(b) for b in bounds)
    if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
        raise ConfigurationError(f"invalid parameter box {bounds}")
    lam, mu, q = physics["lambda"], physics["mu"], physics["q"]
    params = np.random.default_rng(seed).uniform(lo, hi, size=(n, 4))

    def solve(m):
        return solve_kernels(m, lam, mu, q, tri)

    workers = workers or thread_count()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            pairs = list(pool.map(solve, params))
    else:
        pairs = [solve(m) for m in params]
    alpha = np.stack([k.alpha.values for k in pairs])
    beta = np.stack([k.beta.values for k in pairs])
    return KernelDataset(params, alpha, beta, tri, (lo, hi), seed,
                         {"lambda": lam, "mu": mu, "q": q})


def _atomic_write(path: Path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    try:
        tmp.write_bytes(data)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def save_dataset(ds: KernelDataset, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {"magic": DATASET_MAGIC, "n": ds.n, "dx": ds.tri.dx, "bounds": list(ds.bounds),
                "seed": ds.seed, "split": ds.split, "physics": ds.physics}
    blob = np.concatenate([ds.params, ds.alpha, ds.beta], axis=1).astype("<f8").tobytes()
    _atomic_write(directory / "samples.bin", blob)
    _atomic_write(directory / "manifest.json", (json.dumps(manifest, indent=2) + "\n").encode())


def load_dataset(directory) -> KernelDataset:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
        raw = (directory / "samples.bin").read_bytes()
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read dataset in {directory}: {exc}") from exc
    if manifest.get("magic") != DATASET_MAGIC:
        raise FormatError(f"{directory}/manifest.json: bad magic {manifest.get('magic')!r}")
    try:
        tri = TriangleGrid(SpatialGrid.from_dx(manifest["dx"]))
        n = int(manifest["n"])
        width = 4 + 2 * tri.size
        if len(raw) != 8 * n * width:
            raise FormatError(f"samples.bin has {len(raw)} bytes, expected {8 * n * width}")
        data = np.frombuffer(raw, dtype="<f8").reshape(n, width).astype(float)
        return KernelDataset(data[:, :4], data[:, 4:4 + tri.size], data[:, 4 + tri.size:], tri,
                             tuple(manifest["bounds"]), int(manifest["seed"]), dict(manifest["physics"]),
                             float(manifest.get("split", 0.9)))
    except (KeyError, TypeError, ValueError, ConfigurationError) as exc:
        raise FormatError(f"malformed dataset manifest in {directory}: {exc}") from exc


# ---------------------------------------------------------------- training

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 2000
    lr: float = 1e-3
    decay_every: int = 100
    decay_factor: float = 0.5
    batch_size: int | None = None   # samples per batch; None = full batch
    seed: int = 0
    target_loss: float | None = None
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1 or self.lr <= 0 or self.decay_every < 1 or not 0 < self.decay_factor <= 1:
            raise ConfigurationError(f"invalid training configuration {self}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be positive, got {self.batch_size}")


@dataclass
class LossHistory:
    train: list = field(default_factory=list)
    test: list = field(default_factory=list)
    lr: list = field(default_factory=list)


def _loss_and_grads(model: DeepONetModel, u: np.ndarray, basis_outs: list[np.ndarray],
                    target: np.ndarray, scale: float, shift: float, want_grad=True):
    """MSE of (scaled) predictions and its gradients w.r.t. every weight and bias0."""
    act, dact = ACTIVATIONS[model.activation]
    b_outs = mlp_forward(model.branch, u, act)
    B, T = b_outs[-1], basis_outs[-1]
    resid = B @ T.T + model.bias0 - (target - shift) / scale
    loss = float(np.mean(resid ** 2))
    if not want_grad:
        return loss, None
    G = (2.0 / resid.size) * resid
    g_branch = mlp_backward(model.branch, b_outs, G @ T, dact)
    g_trunk = mlp_backward(model.trunk, basis_outs, G.T @ B, dact)
    grads = []
    for layer in g_branch + g_trunk:
        grads += [layer.w, layer.b]
    return loss, (grads, float(G.sum()))


def loss_and_gradients(model: DeepONetModel, params: np.ndarray, points: np.ndarray, target: np.ndarray):
    """Raw-target MSE and gradients; ``target`` has shape (n_samples, n_points)."""
    act = ACTIVATIONS[model.activation][0]
    t_outs = mlp_forward(model.trunk, np.asarray(points, dtype=float), act)
    u = np.atleast_2d(np.asarray(params, dtype=float)) / model.scaling
    return _loss_and_grads(model, u, t_outs, np.asarray(target, dtype=float), 1.0, 0.0)


def _fold_output_scale(model: DeepONetModel, scale: float, shift: float) -> None:
    """Rewrite weights so the raw model predicts scale * normalised + shift."""
    last = model.branch[-1]
    last.w *= scale
    last.b *= scale
    model.bias0 = scale * model.bias0 + shift


def evaluate_mse(model: DeepONetModel, ds: KernelDataset, which: str = "test") -> float:
    idx = np.arange(ds.n_train) if which == "train" else np.arange(ds.n_train, ds.n)
    if idx.size == 0:
        return float("nan")
    pred = model.branch_out(ds.params[idx]) @ model.trunk_basis(ds.tri).T + model.bias0
    return float(np.mean((pred - ds.target(model.kernel)[idx]) ** 2))


def train(model: DeepONetModel, data: KernelDataset, cfg: TrainConfig) -> tuple[DeepONetModel, LossHistory]:
    """Adam with step decay on the mean squared kernel error.

    Targets are standardised internally (one mean and one spread over the
    training split); the affine map is folded back into the last branch
    layer and bias0 afterwards, so the returned model predicts raw kernel
    values.  History entries are raw-scale MSEs.
    """
    y = data.target(model.kernel)
    if not np.all(np.isfinite(y)):
        raise ConfigurationError(f"{model.kernel} targets contain non-finite values")
    n_train = data.n_train
    y_train, y_test = y[:n_train], y[n_train:]
    u_train = data.params[:n_train] / model.scaling
    u_test = data.params[n_train:] / model.scaling
    shift = float(y_train.mean())
    scale = float(y_train.std()) or 1.0
    # Work in standardised units: rescale the output layer and bias0 to match.
    model.bias0 = (model.bias0 - shift) / scale
    model.branch[-1].w /= scale
    model.branch[-1].b /= scale
    model.invalidate()

    act = ACTIVATIONS[model.activation][0]
    points = data.tri.points
    params = model.parameters()
    m1 = [np.zeros_like(p) for p in params] + [0.0]
    m2 = [np.zeros_like(p) for p in params] + [0.0]
    b1, b2 = cfg.betas
    rng = np.random.default_rng(cfg.seed)
    batch = cfg.batch_size or n_train
    hist = LossHistory()
    step = 0
    for epoch in range(cfg.epochs):
        lr = cfg.lr * cfg.decay_factor ** (epoch // cfg.decay_every)
        order = np.arange(n_train) if batch >= n_train else rng.permutation(n_train)
        t_outs = mlp_forward(model.trunk, points, act)
        for start in range(0, n_train, batch):
            sel = order[start:start + batch]
            if start:
                t_outs = mlp_forward(model.trunk, points, act)
            _, (grads, g0) = _loss_and_grads(model, u_train[sel], t_outs, y_train[sel], scale, shift)
            step += 1
            c1, c2 = 1.0 - b1 ** step, 1.0 - b2 ** step
            for k, (p, g) in enumerate(zip(params, grads)):
                m1[k] = b1 * m1[k] + (1 - b1) * g
                m2[k] = b2 * m2[k] + (1 - b2) * g * g
                p -= lr * (m1[k] / c1) / (np.sqrt(m2[k] / c2) + cfg.eps)
            m1[-1] = b1 * m1[-1] + (1 - b1) * g0
            m2[-1] = b2 * m2[-1] + (1 - b2) * g0 * g0
            model.bias0 -= lr * (m1[-1] / c1) / (math.sqrt(m2[-1] / c2) + cfg.eps)
        t_outs = mlp_forward(model.trunk, points, act)
        tr, _ = _loss_and_grads(model, u_train, t_outs, y_train, scale, shift, want_grad=False)
        te = (_loss_and_grads(model, u_test, t_outs, y_test, scale, shift, want_grad=False)[0]
              if len(y_test) else float("nan"))
        tr, te = tr * scale ** 2, te * scale ** 2
        if not np.isfinite(tr):
            raise DivergenceError(f"training loss became non-finite at epoch {epoch}", index=epoch)
        hist.train.append(tr)
        hist.test.append(te)
        hist.lr.append(lr)
        if epoch % 100 == 0:
            log.debug("epoch %d lr %.2e train %.3e test %.3e", epoch, lr, tr, te)
        if cfg.target_loss is not None and tr <= cfg.target_loss:
            break
    _fold_output_scale(model, scale, shift)
    model.dx = data.tri.dx
    model.invalidate()
    return model, hist


# ---------------------------------------------------------------- model files

def _layer_to_json(layer: Layer) -> dict:
    return {"w": layer.w.tolist(), "b": layer.b.tolist()}


def _layer_from_json(obj) -> Layer:
    w = np.array(obj["w"], dtype=float)
    b = np.array(obj["b"], dtype=float)
    if w.ndim != 2 or b.ndim != 1:
        raise FormatError("layer arrays have the wrong rank")
    return Layer(w, b)


def model_to_dict(model: DeepONetModel) -> dict:
    return {
        "magic": MODEL_MAGIC, "kernel": model.kernel, "p": model.p, "hidden": model.hidden,
        "activation": model.activation, "scaling": model.scaling.tolist(), "dx": model.dx,
        "seed": model.seed,
        "branch": [_layer_to_json(layer) for layer in model.branch],
        "trunk": [_layer_to_json(layer) for layer in model.trunk],
        "bias0": float(model.bias0),
    }


def save_model(model: DeepONetModel, path) -> None:
    # json writes floats with repr(), which round-trips binary64 exactly.
    _atomic_write(Path(path), (json.dumps(model_to_dict(model)) + "\n").encode())


def load_model(path) -> DeepONetModel:
    try:
        obj = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"cannot read model {path}: {exc}") from exc
    if not isinstance(obj, dict) or obj.get("magic") != MODEL_MAGIC:
        got = obj.get("magic") if isinstance(obj, dict) else None
        raise FormatError(f"{path}: not a DeepONet model file (magic {got!r})")
    try:
        model = DeepONetModel(
            [_layer_from_json(o) for o in obj["branch"]], [_layer_from_json(o) for o in obj["trunk"]],
            float(obj["bias0"]), obj["kernel"], obj["activation"], np.array(obj["scaling"], dtype=float),
            float(obj["dx"]), int(obj["seed"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed model file: {exc}") from exc
    if model.p != obj["p"] or model.hidden != obj["hidden"]:
        raise FormatError(f"{path}: declared p/hidden do not match layer shapes")
    return model


def write_loss_csv(hist: LossHistory, path) -> None:
    lines = ["epoch,lr,train_mse,test_mse"]
    lines += [f"{k},{lr!r},{tr!r},{te!r}" for k, (lr, tr, te) in enumerate(zip(hist.lr, hist.train, hist.test))]
    _atomic_write(Path(path), ("\n".join(lines) + "\n").encode())

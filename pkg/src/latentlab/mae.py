"""Toy masked autoencoder over a pixel layout.

The encoder reads the visible coordinates (masked slots zero-filled, binary
mask indicator appended) and emits a code of width ``d_c``; the decoder reads
the code plus a fresh noise vector of width ``d_sm`` and the indicator, and
reconstructs the full pixel row.  Training minimizes the squared error on
the masked coordinates only.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from latentlab.graph import Mask, NodeId
from latentlab.nets import Adam, Mlp, flatten, init_mlp, mlp_backward, mlp_forward, unflatten
from latentlab.scm import Dataset


class TrainingDiverged(RuntimeError):
    """Raised when the training loss becomes non-finite."""


@dataclass(frozen=True)
class MaskSampler:
    """Uniform patch masking: the layout is split into ceil(len/s) contiguous
    patches and round(r * num_patches) of them are masked, clamped so that at
    least one patch stays on each side."""

    r: float
    s: int
    layout: tuple[NodeId, ...]

    def __post_init__(self):
        if not 0.0 < self.r < 1.0:
            raise ValueError(f"masking ratio must be in (0, 1), got {self.r}")
        if self.s < 1:
            raise ValueError(f"patch size must be positive, got {self.s}")
        if self.num_patches < 2:
            raise ValueError("layout must split into at least two patches")

    @property
    def num_patches(self) -> int:
        return math.ceil(len(self.layout) / self.s)

    def patches(self) -> list[tuple[NodeId, ...]]:
        return [tuple(self.layout[i:i + self.s]) for i in range(0, len(self.layout), self.s)]

    def num_masked_patches(self) -> int:
        k = int(math.floor(self.r * self.num_patches + 0.5))
        return min(max(k, 1), self.num_patches - 1)


def sample_mask(sampler: MaskSampler, rng: np.random.Generator) -> Mask:
    patches = sampler.patches()
    chosen = rng.choice(len(patches), size=sampler.num_masked_patches(), replace=False)
    return Mask(v for i in chosen for v in patches[i])


@dataclass
class MaeModel:
    encoder: Mlp
    decoder: Mlp
    layout: tuple[NodeId, ...]
    widths: dict[NodeId, int]  # coordinate width per pixel node
    d_c: int
    d_sm: int
    hidden: tuple[int, ...]
    slope: float
    param_seed: int

    @property
    def obs_width(self) -> int:
        return sum(self.widths[v] for v in self.layout)

    def spans(self) -> dict[NodeId, tuple[int, int]]:
        """Coordinate span of each pixel node within a layout-ordered row."""
        out, offset = {}, 0
        for v in self.layout:
            out[v] = (offset, self.widths[v])
            offset += self.widths[v]
        return out

    def params(self) -> list[np.ndarray]:
        return self.encoder.params() + self.decoder.params()


def init_mae_model(
    layout: Sequence[NodeId],
    widths: Mapping[NodeId, int],
    d_c: int,
    d_sm: int,
    hidden: tuple[int, ...] = (64, 64),
    slope: float = 0.2,
    seed: int = 0,
) -> MaeModel:
    if d_c < 1:
        raise ValueError("code width d_c must be at least 1")
    if d_sm < 0:
        raise ValueError("noise width d_sm must be non-negative")
    layout = tuple(layout)
    widths = {v: int(widths[v]) for v in layout}
    obs_width = sum(widths.values())
    indicator = len(layout)
    ss = np.random.SeedSequence(seed)
    enc_rng, dec_rng = (np.random.default_rng(child) for child in ss.spawn(2))
    encoder = init_mlp((obs_width + indicator, *hidden, d_c), slope, enc_rng)
    decoder = init_mlp((d_c + d_sm + indicator, *hidden, obs_width), slope, dec_rng)
    return MaeModel(
        encoder=encoder,
        decoder=decoder,
        layout=layout,
        widths=widths,
        d_c=d_c,
        d_sm=d_sm,
        hidden=tuple(hidden),
        slope=slope,
        param_seed=seed,
    )


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 150
    batch_size: int = 128
    step_size: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0
    mask_mode: str = "fixed"  # "fixed" or "resampled"
    boundary_exclusion: bool = False

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.step_size <= 0:
            raise ValueError("epochs, batch size, and step size must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("moment decay rates must lie in (0, 1)")
        if self.mask_mode not in ("fixed", "resampled"):
            raise ValueError(f"unknown mask mode {self.mask_mode!r}")


# -- coordinate bookkeeping -----------------------------------------------------


def _coord_columns(model: MaeModel, nodes) -> np.ndarray:
    spans = model.spans()
    cols = []
    for v in sorted(nodes, key=model.layout.index):
        offset, length = spans[v]
        cols.extend(range(offset, offset + length))
    return np.asarray(cols, dtype=int)


def _check_mask(model: MaeModel, mask: Mask) -> None:
    unknown = mask.masked - set(model.layout)
    if unknown:
        raise ValueError(f"mask refers to nodes outside the layout: {sorted(unknown)}")
    if not mask.masked or mask.masked == set(model.layout):
        raise ValueError("mask must leave both a masked and a visible part")


def _indicator(model: MaeModel, mask: Mask) -> np.ndarray:
    return np.array([1.0 if v in mask.masked else 0.0 for v in model.layout])


def active_masked_nodes(model: MaeModel, mask: Mask, boundary_exclusion: bool) -> list[NodeId]:
    """Masked pixels contributing to the loss.  With boundary exclusion on,
    masked pixels adjacent to a visible pixel in the layout are dropped."""
    _check_mask(model, mask)
    if not boundary_exclusion:
        return [v for v in model.layout if v in mask.masked]
    keep = []
    for i, v in enumerate(model.layout):
        if v not in mask.masked:
            continue
        neighbors = [model.layout[j] for j in (i - 1, i + 1) if 0 <= j < len(model.layout)]
        if all(w in mask.masked for w in neighbors):
            keep.append(v)
    if not keep:
        raise ValueError("boundary exclusion removed every masked coordinate")
    return keep


# -- forward passes ---------------------------------------------------------------


def _encoder_input(model: MaeModel, full_rows: np.ndarray, mask: Mask) -> np.ndarray:
    masked_cols = _coord_columns(model, mask.masked)
    x = full_rows.copy()
    if masked_cols.size:
        x[:, masked_cols] = 0.0
    ind = np.broadcast_to(_indicator(model, mask), (x.shape[0], len(model.layout)))
    return np.hstack([x, ind])


def encode(model: MaeModel, x_visible: np.ndarray, mask: Mask) -> np.ndarray:
    """Deterministic code for the visible coordinates (given in layout order)."""
    _check_mask(model, mask)
    x_visible = np.asarray(x_visible, dtype=float)
    single = x_visible.ndim == 1
    rows = np.atleast_2d(x_visible)
    visible_cols = _coord_columns(model, set(model.layout) - mask.masked)
    if rows.shape[1] != visible_cols.size:
        raise ValueError(
            f"expected visible width {visible_cols.size}, got {rows.shape[1]}"
        )
    full = np.zeros((rows.shape[0], model.obs_width))
    full[:, visible_cols] = rows
    chat, _ = mlp_forward(model.encoder, _encoder_input(model, full, mask))
    return chat[0] if single else chat


def decode(model: MaeModel, chat: np.ndarray, s_hat: np.ndarray, mask: Mask) -> np.ndarray:
    """Full-width reconstruction from a code and a noise draw; only the masked
    coordinates are meaningful to the loss."""
    _check_mask(model, mask)
    chat = np.asarray(chat, dtype=float)
    single = chat.ndim == 1
    chat = np.atleast_2d(chat)
    s_hat = np.asarray(s_hat, dtype=float).reshape(chat.shape[0], model.d_sm)
    if chat.shape[1] != model.d_c:
        raise ValueError(f"expected code width {model.d_c}, got {chat.shape[1]}")
    ind = np.broadcast_to(_indicator(model, mask), (chat.shape[0], len(model.layout)))
    out, _ = mlp_forward(model.decoder, np.hstack([chat, s_hat, ind]))
    return out[0] if single else out


def _loss_and_grads(
    model: MaeModel,
    batch: np.ndarray,
    mask: Mask,
    s_hat: np.ndarray,
    active_cols: np.ndarray,
) -> tuple[float, list[np.ndarray]]:
    n = batch.shape[0]
    enc_in = _encoder_input(model, batch, mask)
    chat, enc_cache = mlp_forward(model.encoder, enc_in)
    ind = np.broadcast_to(_indicator(model, mask), (n, len(model.layout)))
    dec_in = np.hstack([chat, s_hat, ind])
    recon, dec_cache = mlp_forward(model.decoder, dec_in)

    err = recon[:, active_cols] - batch[:, active_cols]
    value = float(np.mean(err ** 2))

    grad_recon = np.zeros_like(recon)
    grad_recon[:, active_cols] = 2.0 * err / err.size
    dec_grads, grad_dec_in = mlp_backward(model.decoder, dec_cache, grad_recon)
    enc_grads, _ = mlp_backward(model.encoder, enc_cache, grad_dec_in[:, : model.d_c])
    return value, enc_grads + dec_grads


def loss(
    model: MaeModel,
    batch: np.ndarray,
    mask: Mask,
    rng: np.random.Generator,
    boundary_exclusion: bool = False,
) -> float:
    """Mean squared error on the masked coordinates, averaged over the batch;
    the decoder noise is drawn per example from ``rng``."""
    batch = np.atleast_2d(np.asarray(batch, dtype=float))
    if batch.shape[1] != model.obs_width:
        raise ValueError(f"expected rows of width {model.obs_width}, got {batch.shape[1]}")
    active = _coord_columns(model, active_masked_nodes(model, mask, boundary_exclusion))
    s_hat = rng.standard_normal((batch.shape[0], model.d_sm))
    value, _ = _loss_and_grads(model, batch, mask, s_hat, active)
    return value


def train(
    dataset: Dataset,
    mask_spec: Mask | MaskSampler,
    d_c: int,
    d_sm: int,
    cfg: TrainConfig = TrainConfig(),
    hidden: tuple[int, ...] = (64, 64),
    slope: float = 0.2,
) -> tuple[MaeModel, list[float]]:
    """Minibatch adaptive-moment training of the masked-reconstruction
    objective; returns the model and the per-epoch loss curve.  Fully
    deterministic given the config seed."""
    if dataset.n == 0:
        raise ValueError("dataset is empty")
    layout = dataset.layout
    widths = {v: dataset.column_spans[v][1] for v in layout}
    rows = dataset.stack(layout)

    ss = np.random.SeedSequence(cfg.seed)
    param_ss, shuffle_ss, noise_ss, mask_ss = ss.spawn(4)
    param_seed = int(param_ss.generate_state(1)[0])
    model = init_mae_model(layout, widths, d_c, d_sm, hidden=hidden, slope=slope, seed=param_seed)

    shuffle_rng = np.random.default_rng(shuffle_ss)
    noise_rng = np.random.default_rng(noise_ss)
    mask_rng = np.random.default_rng(mask_ss)

    if isinstance(mask_spec, MaskSampler):
        sampler = mask_spec
        mask = sample_mask(sampler, mask_rng)
    else:
        sampler = None
        mask = mask_spec
    if cfg.mask_mode == "resampled" and sampler is None:
        raise ValueError("resampled mask mode requires a MaskSampler")
    active = _coord_columns(model, active_masked_nodes(model, mask, cfg.boundary_exclusion))

    params = model.params()
    optimizer = Adam(params, cfg.step_size, cfg.beta1, cfg.beta2)
    curve: list[float] = []
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(dataset.n)
        epoch_losses = []
        for start in range(0, dataset.n, cfg.batch_size):
            batch = rows[order[start:start + cfg.batch_size]]
            if cfg.mask_mode == "resampled":
                mask = sample_mask(sampler, mask_rng)
                active = _coord_columns(
                    model, active_masked_nodes(model, mask, cfg.boundary_exclusion)
                )
            s_hat = noise_rng.standard_normal((batch.shape[0], model.d_sm))
            value, grads = _loss_and_grads(model, batch, mask, s_hat, active)
            if not np.isfinite(value):
                raise TrainingDiverged(
                    f"non-finite loss {value} at epoch {epoch}, step {start // cfg.batch_size}"
                )
            optimizer.step(params, grads)
            epoch_losses.append(value)
        curve.append(float(np.mean(epoch_losses)))
    return model, curve


def grad_check(
    model: MaeModel,
    batch: np.ndarray,
    mask: Mask,
    rng: np.random.Generator | None = None,
    boundary_exclusion: bool = False,
    step: float = 1e-5,
) -> float:
    """Max relative deviation between the analytic gradient and central finite
    differences over every parameter; the noise draw is frozen across all
    evaluations."""
    batch = np.atleast_2d(np.asarray(batch, dtype=float))
    n_params = sum(p.size for p in model.params())
    if n_params > 10_000:
        raise ValueError(f"model has {n_params} parameters, too many for finite differences")
    active = _coord_columns(model, active_masked_nodes(model, mask, boundary_exclusion))
    rng = rng or np.random.default_rng(0)
    s_hat = rng.standard_normal((batch.shape[0], model.d_sm))

    params = model.params()
    _, grads = _loss_and_grads(model, batch, mask, s_hat, active)
    analytic = flatten(grads)

    flat = flatten(params)
    numeric = np.empty_like(flat)

    def loss_at(values: np.ndarray) -> float:
        for p, new in zip(params, unflatten(values, params)):
            p[...] = new
        value, _ = _loss_and_grads(model, batch, mask, s_hat, active)
        return value

    original = flat.copy()
    for i in range(flat.size):
        flat[i] = original[i] + step
        up = loss_at(flat)
        flat[i] = original[i] - step
        down = loss_at(flat)
        flat[i] = original[i]
        numeric[i] = (up - down) / (2 * step)
    loss_at(original)

    denom = np.maximum(1e-6, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))


def reconstruction_metrics(reconstruction: np.ndarray, target: np.ndarray, peak: float) -> dict[str, float]:
    """Pixel-level fidelity: mean squared error and peak signal-to-noise ratio
    (infinite when the error vanishes)."""
    reconstruction = np.asarray(reconstruction, dtype=float)
    target = np.asarray(target, dtype=float)
    if reconstruction.shape != target.shape:
        raise ValueError("reconstruction and target must have identical shapes")
    if peak <= 0:
        raise ValueError("peak must be positive")
    mse = float(np.mean((reconstruction - target) ** 2))
    psnr = math.inf if mse == 0 else 10.0 * math.log10(peak ** 2 / mse)
    return {"mse": mse, "psnr": psnr}


# -- checkpoints -------------------------------------------------------------------


def save_model(model: MaeModel, basepath: str | Path) -> dict[str, Path]:
    """Write ``<base>.json`` (architecture and seeds) plus ``<base>.bin``
    (flat float64 parameter array)."""
    base = Path(basepath)
    base.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "layout": list(model.layout),
        "widths": {v: model.widths[v] for v in model.layout},
        "d_c": model.d_c,
        "d_sm": model.d_sm,
        "hidden": list(model.hidden),
        "slope": model.slope,
        "param_seed": model.param_seed,
        "n_params": int(sum(p.size for p in model.params())),
    }
    json_path = base.with_suffix(".json")
    json_path.write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    bin_path = base.with_suffix(".bin")
    bin_path.write_bytes(flatten(model.params()).tobytes())
    return {"json": json_path, "bin": bin_path}


def load_model(basepath: str | Path) -> MaeModel:
    base = Path(basepath)
    header = json.loads(base.with_suffix(".json").read_text())
    model = init_mae_model(
        header["layout"],
        header["widths"],
        header["d_c"],
        header["d_sm"],
        hidden=tuple(header["hidden"]),
        slope=header["slope"],
        seed=header["param_seed"],
    )
    flat = np.frombuffer(base.with_suffix(".bin").read_bytes(), dtype=np.float64)
    if flat.size != header["n_params"]:
        raise ValueError("parameter file does not match the checkpoint header")
    for p, new in zip(model.params(), unflatten(flat, model.params())):
        p[...] = new
    return model


def save_loss_curve(curve: list[float], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["epoch,loss"] + [f"{i},{value!r}" for i, value in enumerate(curve)]
    path.write_text("\n".join(lines) + "\n")
    return path

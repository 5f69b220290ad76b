"""Masked multi-domain reconstruction: model, loss, muP init, training and probes."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .config import ModelConfig, MuPConfig
from .embedder import Embedder, PatchGrid, patchify, sample_mask
from .ingest import ChannelMeta, CleanSegment, SUBTYPES, _atomic_write
from .moirai import Encoder, Registers, add_registers, strip_registers
from .ndcore import ConfigError, beta31_subset_size, make_rng, rfft_log_mag, stft_log_mag

log = logging.getLogger(__name__)


MAX_CHANNELS = 32
MAX_PATCHES = 30


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, trace):
        super().__init__(msg)
        self.trace = trace


class GradCheckError(RuntimeError):
    pass


@dataclass
class Sample:
    grid: PatchGrid
    mask: np.ndarray  # (C, N) bool


# -- model ---------------------------------------------------------------------

class ReconstructionHeads(nn.Module):
    """Parallel linear maps from a patch representation to raw / FFT / STFT targets."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        lam = cfg.loss_weights
        self.raw = nn.Linear(cfg.d_model, cfg.patch_size) if lam[0] > 0 else None
        self.fft = nn.Linear(cfg.d_model, cfg.fft_bins) if lam[1] > 0 else None
        self.stft_shapes = cfg.stft_shapes() if lam[2] > 0 else []
        self.stft = nn.ModuleList(nn.Linear(cfg.d_model, f * t) for f, t in self.stft_shapes)

    def forward(self, h):
        out = {}
        if self.raw is not None:
            out["raw"] = self.raw(h)
        if self.fft is not None:
            out["fft"] = self.fft(h)
        if len(self.stft):
            out["stft"] = [head(h).unflatten(-1, shape) for head, shape in zip(self.stft, self.stft_shapes)]
        return out


def multi_head_project(h, heads: ReconstructionHeads):
    return heads(h)


class ReconstructionModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.embedder = Embedder(cfg)
        self.registers = Registers(cfg.d_model) if cfg.use_registers else None
        self.encoder = Encoder(cfg)
        self.heads = ReconstructionHeads(cfg)

    def encode(self, patches, channels, mask=None, record=None):
        """Enhanced embedding -> registers -> encoder -> strip registers; (C, N, d)."""
        x = self.embedder(patches, channels, mask)
        if record is not None:
            record.append(x)
        if self.registers is not None:
            x = add_registers(x, self.registers)
        h = self.encoder(x, torch.arange(x.shape[-2]), record)
        return strip_registers(h) if self.registers is not None else h

    def forward(self, patches, channels, mask=None):
        return self.heads(self.encode(patches, channels, mask))

    def sample_loss(self, sample: Sample):
        patches = torch.from_numpy(sample.grid.patches)
        preds = self(patches, sample.grid.channels, sample.mask)
        return pretrain_loss(preds, make_targets(sample.grid.patches, self.cfg), sample.mask,
                             self.cfg.loss_weights)

    def loss(self, batch: list[Sample]):
        return sum(self.sample_loss(s) for s in batch) / len(batch)

    def param_groups(self) -> dict[str, str]:
        """Parameter name -> logical group (used by grad checks and reporting)."""
        return {name: param_group_name(name) for name, _ in self.named_parameters()}


def param_group_name(name: str) -> str:
    if name.startswith("embedder.cnn"):
        return "cnn"
    if name.startswith("embedder.spectral"):
        return "spectral"
    if name.startswith("embedder.modality"):
        return "modality"
    if name.startswith("embedder.stcpe"):
        return "stcpe"
    if name.startswith("registers"):
        return "registers"
    if name.startswith("heads"):
        return "heads"
    if name.endswith(("u1", "u2")):
        return "attention_bias"
    if ".attn." in name:
        return "attention"
    if ".ffn." in name:
        return "glu"
    if "norm" in name:
        return "norm"
    return "other"


# -- targets and loss ----------------------------------------------------------

def make_targets(patches: np.ndarray, cfg: ModelConfig) -> dict:
    """Reconstruction targets from the original (unmasked) patches."""
    lam = cfg.loss_weights
    out = {}
    if lam[0] > 0:
        out["raw"] = torch.from_numpy(np.asarray(patches, dtype=np.float64))
    if lam[1] > 0:
        out["fft"] = torch.from_numpy(rfft_log_mag(patches, cfg.sample_rate_hz, cfg.cutoff_hz))
    if lam[2] > 0 and cfg.stft_windows:
        out["stft"] = [torch.from_numpy(stft_log_mag(patches, w, w // 2, cfg.sample_rate_hz, cfg.cutoff_hz))
                       for w in cfg.stft_windows]
    return out


def _masked_mse(pred, target, mask):
    err = (pred - target) ** 2
    per_patch = err.flatten(2).mean(-1)  # (C, N)
    return (per_patch * mask).sum()


def pretrain_loss(preds: dict, targets: dict, mask, weights) -> torch.Tensor:
    """Sum over masked patches of lam1*MSE_raw + lam2*MSE_fft + lam3*sum_res MSE_stft.

    MSE is the mean over the elements of one patch in one domain.
    """
    m = torch.as_tensor(mask, dtype=torch.float64)
    if m.sum() == 0:
        warnings.warn("empty mask: reconstruction loss is zero", RuntimeWarning, stacklevel=2)
    lam1, lam2, lam3 = weights
    total = torch.zeros(())
    if lam1 > 0:
        total = total + lam1 * _masked_mse(preds["raw"].unsqueeze(-1), targets["raw"].unsqueeze(-1), m)
    if lam2 > 0:
        total = total + lam2 * _masked_mse(preds["fft"].unsqueeze(-1), targets["fft"].unsqueeze(-1), m)
    if lam3 > 0:
        for p, t in zip(preds["stft"], targets["stft"]):
            total = total + lam3 * _masked_mse(p, t, m)
    return total


# -- input resampling ----------------------------------------------------------

def resample_input(segment: CleanSegment | PatchGrid, rng: np.random.Generator, P: int = 500) -> PatchGrid:
    """Random channel subset and contiguous patch run, sizes drawn from scaled Beta(3, 1)."""
    grid = segment if isinstance(segment, PatchGrid) else patchify(segment, P)
    c_sub = beta31_subset_size(min(grid.C, MAX_CHANNELS), rng)
    n_sub = beta31_subset_size(min(grid.N, MAX_PATCHES), rng)
    chans = np.sort(rng.choice(grid.C, size=c_sub, replace=False))
    start = int(rng.integers(0, grid.N - n_sub + 1))
    return PatchGrid(grid.patches[chans, start:start + n_sub].copy(),
                     [grid.channels[i] for i in chans])


def make_sample(segment, cfg: ModelConfig, rng: np.random.Generator, resample: bool = True) -> Sample:
    grid = resample_input(segment, rng, cfg.patch_size) if resample else (
        segment if isinstance(segment, PatchGrid) else patchify(segment, cfg.patch_size))
    return Sample(grid, sample_mask(grid.C, grid.N, cfg.mask_ratio, rng))


# -- muP -----------------------------------------------------------------------

INPUT, HIDDEN, OUTPUT, VECTOR = "input", "hidden", "output", "vector"


def mup_role(name: str, param: torch.Tensor, cfg: ModelConfig) -> str:
    """Classify a parameter by which of its dimensions grow with width.

    input: fan-in fixed (first conv, spectral projection, lookup tables, registers)
    hidden: both fan-in and fan-out scale with d_model
    output: fan-out fixed (reconstruction heads)
    vector: biases, norm gains, attention scalars
    """
    if name.startswith("heads") and name.endswith("weight"):
        return OUTPUT
    if name.startswith(("embedder.modality", "registers")):
        return INPUT
    if param.ndim < 2:
        return VECTOR
    if name in ("embedder.cnn.convs.0.weight", "embedder.spectral.proj.weight"):
        return INPUT
    return HIDDEN


def _fan_in(p: torch.Tensor) -> int:
    return int(np.prod(p.shape[1:])) if p.ndim >= 2 else 1


def mup_init(model: ReconstructionModel, mup: MuPConfig, rng: np.random.Generator | int) -> MuPConfig:
    """Initialize ``model`` in place and record per-parameter Adam lr multipliers.

    Matrices get variance 1/fan_in; output heads are further scaled by
    1/width_multiplier. Under muP, hidden and output matrices train with lr
    scaled by 1/width_multiplier; everything else keeps the base lr. With
    ``mup.enabled=False`` this is the standard parameterization (all multipliers 1).
    """
    cfg = model.cfg
    wm = mup.width_multiplier(cfg.d_model)
    seed = rng if isinstance(rng, int) else int(rng.integers(2**63 - 1))
    gen = torch.Generator().manual_seed(seed)
    lr_mult = {}
    with torch.no_grad():
        for name, p in model.named_parameters():
            role = mup_role(name, p, cfg)
            if role == VECTOR:
                if "norm" in name:
                    p.fill_(1.0)
                else:
                    p.zero_()
                lr_mult[name] = 1.0
                continue
            std = 1.0 if name.startswith(("embedder.modality", "registers")) else 1.0 / math.sqrt(_fan_in(p))
            if role == OUTPUT and mup.enabled:
                std /= wm
            p.copy_(torch.randn(p.shape, generator=gen) * std)
            lr_mult[name] = 1.0 / wm if (mup.enabled and role in (HIDDEN, OUTPUT)) else 1.0
    mup.lr_multipliers = lr_mult
    return mup


def build_model(cfg: ModelConfig, mup: MuPConfig | None = None, seed: int = 0) -> tuple[ReconstructionModel, MuPConfig]:
    torch.manual_seed(seed)
    model = ReconstructionModel(cfg)
    mup = mup_init(model, mup or MuPConfig(base_width=cfg.d_model), seed)
    return model, mup


# -- gradient check ------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    per_group: dict
    n_checked: int


def grad_check(model: nn.Module, batch, eps: float = 1e-3, n_params: int = 240, seed: int = 0,
               floor: float = 1e-6) -> GradCheckReport:
    """Compare autograd gradients with central differences on a parameter subsample.

    ``model`` must expose ``loss(batch)`` and ``param_groups()``. Every group
    gets an equal share of the ``n_params`` probes. Relative error is
    |g - fd| / max(|g|, |fd|, floor).
    """
    if not 1e-5 <= eps <= 1e-2:
        raise ConfigError(f"eps {eps} outside [1e-5, 1e-2]")
    was_training = model.training
    model.eval()
    rng = make_rng(seed)
    params = dict(model.named_parameters())
    groups: dict[str, list[str]] = {}
    for name, g in model.param_groups().items():
        groups.setdefault(g, []).append(name)

    model.zero_grad()
    loss = model.loss(batch)
    loss.backward()
    analytic = {n: p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
                for n, p in params.items()}
    for g, names in groups.items():
        if not all(torch.isfinite(analytic[n]).all() for n in names):
            raise GradCheckError(f"non-finite gradient in parameter group {g!r}")

    per_group = {}
    per_group_quota = max(1, math.ceil(n_params / len(groups)))
    n_checked = 0
    with torch.no_grad():
        for g, names in sorted(groups.items()):
            sizes = np.array([params[n].numel() for n in names])
            picks = rng.choice(sizes.sum(), size=min(per_group_quota, sizes.sum()), replace=False)
            offsets = np.concatenate([[0], np.cumsum(sizes)])
            worst = 0.0
            for flat in picks:
                i = int(np.searchsorted(offsets, flat, side="right") - 1)
                name, j = names[i], int(flat - offsets[i])
                view = params[name].view(-1)
                orig = view[j].item()
                view[j] = orig + eps
                up = model.loss(batch).item()
                view[j] = orig - eps
                down = model.loss(batch).item()
                view[j] = orig
                fd = (up - down) / (2 * eps)
                a = analytic[name].view(-1)[j].item()
                worst = max(worst, abs(a - fd) / max(abs(a), abs(fd), floor))
                n_checked += 1
            per_group[g] = worst
    model.train(was_training)
    return GradCheckReport(max(per_group.values()), per_group, n_checked)


# -- synthetic corpus ----------------------------------------------------------

def synthetic_segment(rng: np.random.Generator, n_channels: int = 4, seconds: float = 30.0,
                      fs: float = 500.0) -> CleanSegment:
    """Band-limited noise + a few sinusoids + sparse spikes, normalized to [-1, 1]."""
    t = np.arange(int(seconds * fs)) / fs
    data = np.empty((n_channels, t.size))
    channels = []
    for c in range(n_channels):
        x = np.zeros_like(t)
        for _ in range(rng.integers(1, 4)):
            f = rng.uniform(2.0, 40.0)
            x += rng.uniform(0.1, 0.3) * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
        noise = np.convolve(rng.standard_normal(t.size), np.ones(8) / 8, mode="same")
        x += 0.05 * noise
        spikes = rng.random(t.size) < 0.5 / fs
        x += np.convolve(spikes * rng.choice([-0.5, 0.5], t.size), np.hanning(15), mode="same")
        data[c] = np.clip(x, -1.0, 1.0)
        modality = "iEEG" if rng.random() < 0.5 else "EEG"
        subtype = SUBTYPES[modality][rng.integers(len(SUBTYPES[modality]))]
        coords = tuple(rng.uniform(-8, 8, 3)) if rng.random() < 0.8 else None
        channels.append(ChannelMeta(f"ch{c}", modality, subtype, coords))
    return CleanSegment(data, channels, {"synthetic": True})


def synthetic_corpus(n_segments: int, seed: int, n_channels: int = 4, seconds: float = 30.0) -> list[CleanSegment]:
    rng = make_rng(seed)
    return [synthetic_segment(rng, n_channels, seconds) for _ in range(n_segments)]


# -- optimizer, schedule, training ---------------------------------------------

@dataclass
class Schedule:
    lr: float = 1e-3
    warmup_frac: float = 0.05
    min_lr_frac: float = 0.01
    weight_decay: float = 0.0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 4

    def lr_at(self, step: int, total: int) -> float:
        """Learning rate for 0-based ``step``: linear warmup then cosine to the floor."""
        if total <= 0:
            return self.lr
        warm = max(1, int(round(self.warmup_frac * total))) if self.warmup_frac > 0 else 0
        floor = self.min_lr_frac * self.lr
        if step < warm:
            return self.lr * (step + 1) / warm
        progress = (step - warm) / max(1, total - warm)
        return floor + 0.5 * (self.lr - floor) * (1 + math.cos(math.pi * min(1.0, progress)))


def make_optimizer(model: nn.Module, mup: MuPConfig, sched: Schedule) -> torch.optim.Optimizer:
    groups = []
    for name, p in model.named_parameters():
        mult = mup.lr_multipliers.get(name, 1.0)
        groups.append({"params": [p], "lr": sched.lr * mult, "lr_mult": mult, "name": name})
    return torch.optim.AdamW(groups, lr=sched.lr, betas=sched.betas, eps=sched.eps,
                             weight_decay=sched.weight_decay)


@dataclass
class TraceRow:
    epoch: int
    step: int
    train_loss: float
    test_loss: float
    lr: float


@dataclass
class TrainResult:
    model: ReconstructionModel
    mup: MuPConfig
    trace: list[TraceRow] = field(default_factory=list)
    step: int = 0


def evaluate(model: ReconstructionModel, segments, seed: int) -> float:
    """Mean loss with fixed (seeded) resampling and masks, so evaluations are comparable."""
    if not segments:
        return float("nan")
    rng = make_rng(seed)
    was = model.training
    model.eval()
    with torch.no_grad():
        batch = [make_sample(s, model.cfg, rng) for s in segments]
        val = model.loss(batch).item()
    model.train(was)
    return val


def train_loop(train_set, cfg: ModelConfig, mup: MuPConfig | None = None, sched: Schedule | None = None,
               steps: int = 100, seed: int = 0, test_set=None, model: ReconstructionModel | None = None,
               divergence_factor: float = 1e3, on_step=None) -> TrainResult:
    """Train with AdamW (muP lr multipliers) on resampled, masked segments.

    One trace row per epoch, plus a row for epoch 0 (before the first step)
    when ``steps > 0``. Epoch boundaries fall every ceil(len(train)/batch) steps.
    ``on_step(step, model)`` is called after every optimizer step.
    """
    sched = sched or Schedule()
    torch.manual_seed(seed)
    if model is None:
        model, mup = build_model(cfg, mup, seed)
    elif mup is None:
        raise ConfigError("pass the MuPConfig that initialized the supplied model")
    opt = make_optimizer(model, mup, sched)
    rng = make_rng(seed + 1)
    eval_seed = seed + 2
    test_set = test_set if test_set is not None else []
    result = TrainResult(model, mup)
    if steps <= 0:
        return result

    steps_per_epoch = max(1, math.ceil(len(train_set) / sched.batch_size))
    init_train = evaluate(model, train_set, eval_seed)
    result.trace.append(TraceRow(0, 0, init_train, evaluate(model, test_set, eval_seed),
                                 sched.lr_at(0, steps)))
    order = rng.permutation(len(train_set))
    model.train()
    for step in range(steps):
        pos = step % steps_per_epoch
        if pos == 0 and step > 0:
            order = rng.permutation(len(train_set))
        idx = order[pos * sched.batch_size:(pos + 1) * sched.batch_size]
        batch = [make_sample(train_set[i], cfg, rng) for i in idx]
        lr = sched.lr_at(step, steps)
        for g in opt.param_groups:
            g["lr"] = lr * g["lr_mult"]
        opt.zero_grad()
        loss = model.loss(batch)
        if not torch.isfinite(loss) or loss.item() > divergence_factor * max(init_train, 1e-12):
            raise TrainingDiverged(f"loss {loss.item():.4g} diverged at step {step}", result.trace)
        loss.backward()
        opt.step()
        result.step = step + 1
        if on_step is not None:
            on_step(step + 1, model)
        if pos == steps_per_epoch - 1 or step == steps - 1:
            epoch = step // steps_per_epoch + 1
            result.trace.append(TraceRow(epoch, step + 1, evaluate(model, train_set, eval_seed),
                                         evaluate(model, test_set, eval_seed), lr))
    return result


# -- trace / checkpoint I/O ----------------------------------------------------

TRACE_COLUMNS = ("epoch", "step", "train_loss", "test_loss", "lr")


def _g(x: float) -> str:
    return f"{x:.9g}"


def trace_to_csv(trace: list[TraceRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    for r in trace:
        w.writerow([r.epoch, r.step, _g(r.train_loss), _g(r.test_loss), _g(r.lr)])
    return buf.getvalue()


def save_checkpoint(path, model: ReconstructionModel, mup: MuPConfig, step: int) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    names, shapes, blobs = [], [], []
    for name, p in model.named_parameters():
        names.append(name)
        shapes.append(list(p.shape))
        blobs.append(p.detach().numpy().astype("<f8").ravel())
    _atomic_write(path / "params.f64le", np.concatenate(blobs).tobytes())
    manifest = {
        "parameters": [{"name": n, "shape": s, "group": param_group_name(n),
                        "mup_role": mup_role(n, dict(model.named_parameters())[n], model.cfg)}
                       for n, s in zip(names, shapes)],
        "model_config": model.cfg.to_dict(),
        "mup": asdict(mup),
        "step": step,
    }
    _atomic_write(path / "manifest.json", json.dumps(manifest, indent=2).encode())
    return path


def load_checkpoint(path) -> tuple[ReconstructionModel, MuPConfig, int]:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    cfg_d = {k: tuple(v) if isinstance(v, list) else v for k, v in manifest["model_config"].items()}
    cfg = ModelConfig.from_dict(cfg_d)
    model = ReconstructionModel(cfg)
    blob = np.fromfile(path / "params.f64le", dtype="<f8")
    params = dict(model.named_parameters())
    off = 0
    with torch.no_grad():
        for entry in manifest["parameters"]:
            p = params[entry["name"]]
            n = p.numel()
            p.copy_(torch.from_numpy(blob[off:off + n].copy()).view_as(p))
            off += n
    if off != blob.size:
        raise ConfigError(f"checkpoint blob has {blob.size} values, manifest accounts for {off}")
    return model, MuPConfig(**manifest["mup"]), manifest["step"]


# -- linear probe --------------------------------------------------------------

def linear_probe(embeddings, labels, seed: int = 0, test_fraction: float = 0.3) -> float:
    """Held-out accuracy of an L2-regularized logistic regression on frozen embeddings."""
    from sklearn.linear_model import LogisticRegression
    from sklearn.model_selection import train_test_split

    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels)
    if np.unique(y).size < 2:
        raise ValueError("linear probe needs at least two classes")
    x_tr, x_te, y_tr, y_te = train_test_split(x, y, test_size=test_fraction, random_state=seed, stratify=y)
    clf = LogisticRegression(max_iter=2000)
    clf.fit(x_tr, y_tr)
    return float(np.mean(clf.predict(x_te) == y_te))


def pooled_embeddings(model: ReconstructionModel, grids: list[PatchGrid]) -> np.ndarray:
    """Mean over all (channel, patch) tokens of the frozen encoder output."""
    model.eval()
    with torch.no_grad():
        return np.stack([model.encode(torch.from_numpy(g.patches), g.channels).mean((0, 1)).numpy()
                         for g in grids])


# -- muP coordinate check ------------------------------------------------------

def coord_check(widths=(64, 128, 256), steps: int = 5, mup_enabled: bool = True, base_width: int = 64,
                lr: float = 1e-2, n_layers: int = 2, patch_size: int = 500, n_segments: int = 4,
                n_channels: int = 4, seed: int = 0) -> dict:
    """Mean |activation| per layer at training steps 1..steps, for each width.

    Layers are the enhanced embedding and each encoder block output. Returns
    {width: array[steps, layers]}. Data, masks and resampling are identical
    across widths.
    """
    segments = synthetic_corpus(n_segments, seed, n_channels=n_channels, seconds=10.0)
    out = {}
    for width in widths:
        cfg = ModelConfig(patch_size=patch_size, d_model=width, n_layers=n_layers, dropout=0.0)
        model, mup = build_model(cfg, MuPConfig(base_width=base_width, enabled=mup_enabled), seed)
        opt = make_optimizer(model, mup, Schedule(lr=lr))
        rng = make_rng(seed + 1)
        norms = []
        for _ in range(steps):
            batch = [make_sample(s, cfg, rng) for s in segments]
            record: list = []
            opt.zero_grad()
            total = 0.0
            for s in batch:
                p = torch.from_numpy(s.grid.patches)
                h = model.encode(p, s.grid.channels, s.mask, record)
                total = total + pretrain_loss(model.heads(h), make_targets(s.grid.patches, cfg), s.mask,
                                              cfg.loss_weights)
            n_layers_rec = len(record) // len(batch)
            norms.append([np.mean([record[b * n_layers_rec + i].abs().mean().item() for b in range(len(batch))])
                          for i in range(n_layers_rec)])
            (total / len(batch)).backward()
            opt.step()
        out[width] = np.array(norms)
    return out


def coord_check_spread(result: dict) -> float:
    """Largest max/min ratio of a layer's activation scale across widths, over all steps."""
    stack = np.stack(list(result.values()))  # (widths, steps, layers)
    return float(np.max(stack.max(0) / stack.min(0)))

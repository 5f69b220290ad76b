"""QAQC and minimal preprocessing, plus the on-disk container format.

Pipeline order: high-pass -> 60 Hz notch -> resample to 500 Hz -> 30 s
segmentation -> amplitude normalization/clipping -> channel/segment drops.
"""

from __future__ import annotations

import json
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy import signal

from .ndcore import ConfigError, DataError

log = logging.getLogger(__name__)

TARGET_RATE_HZ = 500.0
SEGMENT_SECONDS = 30.0
SEGMENT_SAMPLES = int(TARGET_RATE_HZ * SEGMENT_SECONDS)
CHANNEL_CLIP_THRESHOLD = 0.0333
SEGMENT_DROP_FRACTION = 0.5
NOTCH_HZ = 60.0
NOTCH_Q = 30.0
HIGHPASS_ORDER = 4

# Amplitude (uV) that maps to 1.0 after normalization.
AMPLITUDE_SCALE_UV = {"EEG": 100.0, "iEEG": 200.0}
SUBTYPES = {"EEG": ("scalp",), "iEEG": ("grid", "strip", "depth")}


@dataclass(frozen=True)
class ChannelMeta:
    name: str
    modality_type: str = "EEG"
    subtype: str = "scalp"
    coords_cm: tuple[float, float, float] | None = None

    def __post_init__(self):
        if self.modality_type not in SUBTYPES:
            raise ConfigError(f"unknown modality {self.modality_type!r} for channel {self.name!r}")
        if self.subtype not in SUBTYPES[self.modality_type]:
            raise ConfigError(
                f"subtype {self.subtype!r} invalid for {self.modality_type} channel {self.name!r}")
        if self.coords_cm is not None:
            object.__setattr__(self, "coords_cm", tuple(float(c) for c in self.coords_cm))

    def to_json(self) -> dict:
        return {"name": self.name, "modality": self.modality_type, "subtype": self.subtype,
                "coords_cm": list(self.coords_cm) if self.coords_cm is not None else None}

    @classmethod
    def from_json(cls, d: dict) -> "ChannelMeta":
        return cls(d["name"], d["modality"], d["subtype"], d.get("coords_cm"))


@dataclass
class RawRecording:
    data: np.ndarray  # (C, T) microvolts
    sample_rate_hz: float
    channels: list[ChannelMeta]

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.shape[0] != len(self.channels):
            raise DataError(f"data shape {self.data.shape} does not match {len(self.channels)} channels")
        if not self.sample_rate_hz > 0:
            raise ConfigError("sample rate must be positive")

    @property
    def duration_s(self) -> float:
        return self.data.shape[1] / self.sample_rate_hz


@dataclass
class CleanSegment:
    data: np.ndarray  # (C', 15000), dimensionless, in [-1, 1]
    channels: list[ChannelMeta]
    provenance: dict = field(default_factory=dict)
    sample_rate_hz: float = TARGET_RATE_HZ


def normalize_clip(rec: RawRecording) -> tuple[np.ndarray, np.ndarray]:
    """Scale channels to unit amplitude (100 uV EEG, 200 uV iEEG) and clip to [-1, 1].

    Returns the clipped array and, per channel, the fraction of samples whose
    scaled magnitude exceeded 1 before clipping.
    """
    scales = []
    for ch in rec.channels:
        if ch.modality_type not in AMPLITUDE_SCALE_UV:
            raise ConfigError(f"unknown modality {ch.modality_type!r}")
        scales.append(AMPLITUDE_SCALE_UV[ch.modality_type])
    scaled = rec.data / np.asarray(scales)[:, None]
    clip_fractions = np.mean(np.abs(scaled) > 1.0, axis=1)
    return np.clip(scaled, -1.0, 1.0), clip_fractions


def qaqc_decide(clip_fractions) -> tuple[list[int], bool]:
    """Drop channels clipped on > 3.33% of samples; drop the segment if > 50% of channels go."""
    fr = np.asarray(clip_fractions, dtype=np.float64)
    dropped = [int(i) for i in np.flatnonzero(fr > CHANNEL_CLIP_THRESHOLD)]
    return dropped, len(dropped) > SEGMENT_DROP_FRACTION * len(fr)


def highpass(data: np.ndarray, fs: float, cutoff_hz: float) -> np.ndarray:
    sos = signal.butter(HIGHPASS_ORDER, cutoff_hz, btype="highpass", fs=fs, output="sos")
    return signal.sosfiltfilt(sos, data, axis=-1)


def notch(data: np.ndarray, fs: float, freq_hz: float = NOTCH_HZ, q: float = NOTCH_Q) -> np.ndarray:
    if freq_hz >= fs / 2:
        return data  # line frequency above Nyquist, nothing to remove
    b, a = signal.iirnotch(freq_hz, q, fs=fs)
    return signal.filtfilt(b, a, data, axis=-1)


def resample(data: np.ndarray, fs: float, target_hz: float = TARGET_RATE_HZ) -> np.ndarray:
    if fs == target_hz:
        return data
    ratio = Fraction(target_hz / fs).limit_denominator(10_000)
    # resample_poly's default FIR is a Kaiser low-pass at the tighter Nyquist
    return signal.resample_poly(data, ratio.numerator, ratio.denominator, axis=-1)


def preprocess_with_report(rec: RawRecording, highpass_hz: float = 0.3
                           ) -> tuple[list[CleanSegment], dict]:
    """Run the full pipeline and return (surviving segments, summary report)."""
    report = {"segments_total": 0, "segments_kept": 0, "segments_dropped": [],
              "channels_dropped": {}, "warnings": []}
    n_seg = int(math.floor(rec.duration_s / SEGMENT_SECONDS + 1e-9))
    if n_seg < 1:
        msg = f"recording is {rec.duration_s:.3f} s, shorter than one {SEGMENT_SECONDS:.0f} s window"
        log.warning(msg)
        report["warnings"].append(msg)
        return [], report

    x = highpass(rec.data, rec.sample_rate_hz, highpass_hz)
    x = notch(x, rec.sample_rate_hz)
    x = resample(x, rec.sample_rate_hz)
    # resample_poly rounds the length up; keep only whole windows
    n_seg = min(n_seg, x.shape[1] // SEGMENT_SAMPLES)
    report["segments_total"] = n_seg

    out = []
    for s in range(n_seg):
        lo = s * SEGMENT_SAMPLES
        chunk = RawRecording(x[:, lo:lo + SEGMENT_SAMPLES], TARGET_RATE_HZ, rec.channels)
        clipped, fractions = normalize_clip(chunk)
        dropped, drop_segment = qaqc_decide(fractions)
        prov = {
            "segment_index": s,
            "start_sample": lo,
            "clip_fractions": {ch.name: float(f) for ch, f in zip(rec.channels, fractions)},
            "dropped_channels": [rec.channels[i].name for i in dropped],
            "segment_dropped": bool(drop_segment),
            "highpass_hz": highpass_hz,
            "notch_hz": NOTCH_HZ,
            "source_rate_hz": rec.sample_rate_hz,
        }
        if dropped:
            report["channels_dropped"][str(s)] = prov["dropped_channels"]
        if drop_segment:
            report["segments_dropped"].append(s)
            continue
        keep = [i for i in range(len(rec.channels)) if i not in set(dropped)]
        out.append(CleanSegment(clipped[keep], [rec.channels[i] for i in keep], prov))
    report["segments_kept"] = len(out)
    return out, report


def preprocess(rec: RawRecording, highpass_hz: float = 0.3) -> list[CleanSegment]:
    return preprocess_with_report(rec, highpass_hz)[0]


# -- container format --------------------------------------------------------

META_FILE = "meta.json"
DATA_FILE = "data.f32le"
PROVENANCE_FILE = "provenance.json"


class ContainerError(DataError):
    pass


def _atomic_write(path: Path, payload: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "wb") as f:
        f.write(payload)
    os.replace(tmp, path)


def write_container(path, data: np.ndarray, channels: list[ChannelMeta], sample_rate_hz: float,
                    units: str = "uV", provenance: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    data = np.asarray(data)
    meta = {"sample_rate_hz": float(sample_rate_hz), "units": units,
            "n_channels": int(data.shape[0]), "n_samples": int(data.shape[1]),
            "channels": [ch.to_json() for ch in channels]}
    _atomic_write(path / DATA_FILE, np.ascontiguousarray(data, dtype="<f4").tobytes())
    _atomic_write(path / META_FILE, json.dumps(meta, indent=2).encode())
    if provenance is not None:
        _atomic_write(path / PROVENANCE_FILE, json.dumps(provenance, indent=2).encode())
    return path


def read_container(path) -> tuple[np.ndarray, list[ChannelMeta], dict]:
    """Load (data[C, T] as float64, channel list, raw meta dict)."""
    path = Path(path)
    meta_path, data_path = path / META_FILE, path / DATA_FILE
    for p in (meta_path, data_path):
        if not p.is_file():
            raise ContainerError(f"missing {p}")
    try:
        meta = json.loads(meta_path.read_text())
        channels = [ChannelMeta.from_json(c) for c in meta["channels"]]
        rate = float(meta["sample_rate_hz"])
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise ContainerError(f"malformed {meta_path}: {e}") from e
    raw = np.fromfile(data_path, dtype="<f4")
    c = len(channels)
    if c == 0 or raw.size % c:
        raise ContainerError(f"{data_path}: {raw.size} floats not divisible by {c} channels")
    t = raw.size // c
    if "n_samples" in meta and int(meta["n_samples"]) != t:
        raise ContainerError(f"{data_path}: expected {meta['n_samples']} samples, found {t}")
    meta["sample_rate_hz"] = rate
    return raw.reshape(c, t).astype(np.float64), channels, meta


def read_recording(path) -> RawRecording:
    data, channels, meta = read_container(path)
    return RawRecording(data, meta["sample_rate_hz"], channels)


def read_segment(path) -> CleanSegment:
    data, channels, meta = read_container(path)
    prov_path = Path(path) / PROVENANCE_FILE
    prov = json.loads(prov_path.read_text()) if prov_path.is_file() else {}
    return CleanSegment(data, channels, prov, meta["sample_rate_hz"])


def write_segment(path, seg: CleanSegment) -> Path:
    return write_container(path, seg.data, seg.channels, seg.sample_rate_hz,
                           units="normalized", provenance=seg.provenance)

"""Architecture hyperparameters, most derived from ``d_model`` and the patch size."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

from .ndcore import ConfigError, n_cutoff_bins, stft_shape

# Per-patch-size defaults that differ between the 1 s and 0.1 s variants.
_PATCH_DEFAULTS = {
    500: dict(cnn_strides=(64, 3, 3), cnn_div=8, loss_weights=(1.0, 0.1, 1.0), stft_windows=(200, 100)),
    50: dict(cnn_strides=(4, 3, 3), cnn_div=16, loss_weights=(1.0, 1.0, 0.0), stft_windows=()),
}


@dataclass
class ModelConfig:
    patch_size: int = 500
    d_model: int = 256
    n_layers: int = 12
    n_heads: int = 0  # 0 -> d_model / 32
    ffn_dim: int = 0  # 0 -> 4 * d_model
    stcpe_dim: int = 0  # 0 -> d_model / 8
    stcpe_window: int = 7
    stcpe_heads: int = 0  # 0 -> max(1, d_model / 256)
    stcpe_ffn_dim: int = 0  # 0 -> d_model / 2
    mask_ratio: float = 0.5
    cnn_inter_channels: int = 0  # 0 -> d_model/8 (P=500) or d_model/16 (P=50)
    cnn_strides: tuple = ()
    cnn_kernels: tuple = (63, 3, 3)
    cnn_paddings: tuple = (31, 1, 1)
    loss_weights: tuple = ()
    stft_windows: tuple | None = None
    pe_temperature: float = 2000.0
    pe_scale: float = 1.0 / 256.0
    dropout: float = 0.1
    sample_rate_hz: float = 500.0
    cutoff_hz: float = 200.0
    spectral_bins: str = "cutoff"  # or "dmodel" for the d_model/2 + 1 convention
    rope_base: float = 10000.0
    use_registers: bool = True

    def __post_init__(self):
        d = self.d_model
        if self.patch_size not in _PATCH_DEFAULTS and not (self.cnn_strides and self.loss_weights):
            raise ConfigError(f"patch size {self.patch_size} needs explicit CNN strides and loss weights")
        if d % 32:
            raise ConfigError(f"d_model must be divisible by 32, got {d}")
        pd = _PATCH_DEFAULTS.get(self.patch_size, {})
        self.n_heads = self.n_heads or d // 32
        self.ffn_dim = self.ffn_dim or 4 * d
        self.stcpe_dim = self.stcpe_dim or d // 8
        self.stcpe_heads = self.stcpe_heads or max(1, d // 256)
        self.stcpe_ffn_dim = self.stcpe_ffn_dim or d // 2
        self.cnn_inter_channels = self.cnn_inter_channels or max(1, d // pd.get("cnn_div", 8))
        self.cnn_strides = tuple(self.cnn_strides or pd["cnn_strides"])
        self.cnn_kernels = tuple(self.cnn_kernels)
        self.cnn_paddings = tuple(self.cnn_paddings)
        self.loss_weights = tuple(float(w) for w in (self.loss_weights or pd["loss_weights"]))
        if self.stft_windows is None:
            self.stft_windows = pd.get("stft_windows", ())
        self.stft_windows = tuple(self.stft_windows)
        if self.loss_weights[2] == 0:
            self.stft_windows = ()
        self.validate()

    def validate(self):
        d = self.d_model
        if d % self.n_heads or (d // self.n_heads) % 2:
            raise ConfigError(f"head dim {d}/{self.n_heads} must be an even integer")
        if self.stcpe_dim % self.stcpe_heads or (self.stcpe_dim // self.stcpe_heads) % 2:
            raise ConfigError("STCPE head dim must be an even integer")
        if self.stcpe_window % 2 == 0:
            raise ConfigError("STCPE window must be odd")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ConfigError("mask ratio must lie in [0, 1]")
        if len(self.loss_weights) != 3 or min(self.loss_weights) < 0:
            raise ConfigError("loss weights must be three nonnegative numbers")
        if not (len(self.cnn_strides) == len(self.cnn_kernels) == len(self.cnn_paddings)):
            raise ConfigError("CNN strides, kernels and paddings must have equal length")
        if self.spectral_bins not in ("cutoff", "dmodel"):
            raise ConfigError(f"unknown spectral_bins mode {self.spectral_bins!r}")
        if self.cnn_out_len() < 1:
            raise ConfigError("CNN reduces the patch to zero length")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def cnn_lengths(self) -> list[int]:
        """Sequence length after each CNN layer."""
        lengths, n = [], self.patch_size
        for k, s, p in zip(self.cnn_kernels, self.cnn_strides, self.cnn_paddings):
            n = (n + 2 * p - k) // s + 1
            lengths.append(n)
        return lengths

    def cnn_out_len(self) -> int:
        return self.cnn_lengths()[-1]

    @property
    def fft_bins(self) -> int:
        return n_cutoff_bins(self.patch_size, self.sample_rate_hz, self.cutoff_hz)

    @property
    def spectral_in_bins(self) -> int:
        if self.spectral_bins == "cutoff":
            return self.fft_bins
        return min(self.d_model // 2 + 1, self.patch_size // 2 + 1)

    def stft_shapes(self) -> list[tuple[int, int]]:
        return [stft_shape(self.patch_size, w, self.sample_rate_hz, self.cutoff_hz)
                for w in self.stft_windows]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown ModelConfig keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class MuPConfig:
    """Width scaling for init and Adam learning rates; ``enabled=False`` gives standard init."""

    base_width: int = 64
    enabled: bool = True
    lr_multipliers: dict = field(default_factory=dict)  # filled in by mup_init

    def width_multiplier(self, d_model: int) -> float:
        if d_model % self.base_width and self.base_width % d_model:
            raise ConfigError(f"base width {self.base_width} incompatible with d_model {d_model}")
        return d_model / self.base_width if self.enabled else 1.0

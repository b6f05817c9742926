"""Model configuration and the strict key=value config-file format."""

from dataclasses import dataclass, fields

from .tensor import ContractError

EXPR_DIM = 53          # FLAME expression coefficients (50) + jaw pose (3)
DEFAULT_FACE_DIM = 50  # split point between the above-jaw and jaw parts

LTA_MODES = ("attention", "mean_pool")


@dataclass
class ModelConfig:
    d_model: int = 768
    heads: int = 12
    d_ff: int = 2048
    n_layers: int = 1          # stacked decoder layers
    msl: int = 256             # maximum expression sequence length
    max_text_len: int = 128
    epochs: int = 100
    warmup: int = 4000
    stop_threshold: float = 1.0
    batch_size: int = 16
    d_attn: int = 0            # frame-encoder attention width; 0 = d_model // 4
    face_dim: int = DEFAULT_FACE_DIM
    clip_norm: float = 1.0     # global gradient-norm clip; 0 disables
    use_ewa: bool = True
    use_lta: bool = True
    use_lg: bool = True
    lta_mode: str = "attention"
    share_projection: bool = False
    sample_reconstruction: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.d_attn == 0:
            self.d_attn = max(self.heads, self.d_model // 4)
        self.validate()

    def validate(self):
        if self.d_model % self.heads != 0:
            raise ContractError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if self.d_attn % self.heads != 0:
            raise ContractError(f"d_attn={self.d_attn} not divisible by heads={self.heads}")
        if self.msl < 1:
            raise ContractError("msl must be >= 1")
        if self.warmup < 1:
            raise ContractError("warmup must be >= 1")
        if not 0 < self.face_dim < EXPR_DIM:
            raise ContractError(f"face_dim must be in (0, {EXPR_DIM})")
        if self.lta_mode not in LTA_MODES:
            raise ContractError(f"lta_mode must be one of {LTA_MODES}")
        if self.n_layers < 1:
            raise ContractError("n_layers must be >= 1")

    @property
    def jaw_dim(self):
        return EXPR_DIM - self.face_dim

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(ModelConfig)}

    @classmethod
    def from_dict(cls, d):
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ContractError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def _parse_value(raw):
    raw = raw.strip()
    if raw in ("true", "True"):
        return True
    if raw in ("false", "False"):
        return False
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        pass
    return raw


def parse_kv_text(text):
    """Parse `key = value` lines; '#' starts a comment; blank lines ignored."""
    out = {}
    for ln, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ContractError(f"config line {ln}: expected 'key = value', got {line!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key in out:
            raise ContractError(f"config line {ln}: duplicate key {key!r}")
        out[key] = _parse_value(raw)
    return out


def format_kv_text(d):
    lines = []
    for k, v in d.items():
        if isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


# Keys a run-config file may carry on top of ModelConfig fields.
RUN_KEYS = {
    "data_dir": str,
    "out_dir": str,
    "encoder": str,            # toy | precomputed
    "embeddings_dir": str,
    "encoder_seed": int,
    "save_figures": bool,
}


def load_run_config(path):
    """Load a training run config; unknown keys are rejected."""
    with open(path, "r", encoding="utf-8") as f:
        raw = parse_kv_text(f.read())
    model_keys = {f.name for f in fields(ModelConfig)}
    run = {}
    model = {}
    for k, v in raw.items():
        if k in model_keys:
            model[k] = v
        elif k in RUN_KEYS:
            run[k] = v
        else:
            raise ContractError(f"unknown config key: {k!r}")
    run.setdefault("encoder", "toy")
    run.setdefault("encoder_seed", 7)
    run.setdefault("save_figures", True)
    if run["encoder"] not in ("toy", "precomputed"):
        raise ContractError(f"encoder must be 'toy' or 'precomputed', got {run['encoder']!r}")
    if "data_dir" not in run:
        raise ContractError("config must set data_dir")
    if "out_dir" not in run:
        raise ContractError("config must set out_dir")
    return ModelConfig.from_dict(model), run

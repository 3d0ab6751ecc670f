"""Run configuration and the UTF-8 ``key=value`` text format.

Field names of :class:`RunConfig` are the documented config-file keys.
Blank lines and lines starting with ``#`` are ignored.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, fields
from pathlib import Path

from .model import ModelConfig
from .stft import StftConfig


@dataclass
class RunConfig:
    sample_rate: int = 8000
    n_fft: int = 128
    hop: int = 64
    mics: int = 2
    sources: int = 2
    C: int = 16
    C_prime: int = 8
    F_prime: int = 32
    R: int = 2
    heads: int = 2
    dconv_kernel: int = 9
    downsample: int = 4
    taps_L: int = 1
    head_mode: str = "MISO"
    input_mode: str = "correlation"
    output_mode: str = "filtering"
    beta_init: float = 0.5
    lr: float = 1e-3
    batch: int = 1
    steps: int = 2000
    seed: int = 0
    # keys below are extensions of the documented set
    efn_expansion: int = 3
    spectral: bool = True
    fixed_beta: typing.Optional[float] = None
    weight_decay: float = 1e-2
    clip_norm: float = 5.0
    crop_seconds: float = 0.8
    val_every: int = 100

    @property
    def stft(self) -> StftConfig:
        return StftConfig(self.n_fft, self.hop)

    def model_config(self, **overrides) -> ModelConfig:
        base = dict(
            n_mics=self.mics, n_src=self.sources, channels=self.C, proj_channels=self.C_prime,
            proj_bins=self.F_prime, stages=self.R, heads=self.heads, dconv_kernel=self.dconv_kernel,
            downsample=self.downsample, taps_l=self.taps_L, n_bins=self.n_fft // 2 + 1,
            head_mode=self.head_mode, input_mode=self.input_mode, output_mode=self.output_mode,
            efn_expansion=self.efn_expansion, spectral=self.spectral, beta_init=self.beta_init,
            fixed_beta=self.fixed_beta,
        )
        base.update(overrides)
        return ModelConfig(**base)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_kv(self) -> dict[str, str]:
        return {f.name: _format(getattr(self, f.name)) for f in fields(self)}

    @classmethod
    def from_kv(cls, kv: dict[str, str], strict: bool = True) -> "RunConfig":
        hints = typing.get_type_hints(cls)
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(kv) - known)
        if unknown and strict:
            raise KeyError(f"unknown config keys: {unknown}")
        return cls(**{k: _parse(v, hints[k]) for k, v in kv.items() if k in known})

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_kv(parse_kv(Path(path).read_text(encoding="utf-8")))

    def save(self, path) -> None:
        Path(path).write_text(format_kv(self.to_kv()), encoding="utf-8")


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def _parse(text: str, hint):
    text = text.strip()
    if typing.get_origin(hint) is typing.Union:
        if text.lower() == "none":
            return None
        hint = next(a for a in typing.get_args(hint) if a is not type(None))
    if hint is bool:
        if text.lower() in ("1", "true", "yes"):
            return True
        if text.lower() in ("0", "false", "no"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    return hint(text)


def parse_kv(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key in out:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def format_kv(kv: dict[str, str]) -> str:
    return "".join(f"{k}={v}\n" for k, v in kv.items())

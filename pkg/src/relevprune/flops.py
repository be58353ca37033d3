"""Analytical FLOPs for the visual-token part of an LLM and for the compressor.

All totals are Python integers, so nothing is rounded. The per-layer LLM
count follows the formula 4nd^2 + 2n^2d + lnm as written, which counts the
FFN as ``l`` passes of n*m rather than the usual 2*n*d*m per matrix.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

COMPRESSOR_CHANNELS = (32, 64, 128, 256, 512)

# total FLOPs the reference setting is reported to reach (11.69 T)
STATED_LLM_TOTAL = 11_690_000_000_000


@dataclass(frozen=True)
class LlmFlopsConfig:
    n: int
    d: int
    m: int
    l: int
    n_layers_lm: int = 1

    def __post_init__(self):
        for name in ("d", "m", "l", "n_layers_lm"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.n < 0:
            raise ValueError("n must be non-negative")


@dataclass(frozen=True)
class ConvFlopsConfig:
    n: int
    layers: tuple[tuple[int, int, int], ...]
    include_final_pointwise: bool = True

    def __post_init__(self):
        if self.n < 0:
            raise ValueError("n must be non-negative")
        for (_, c_out, _), (c_in, _, _) in zip(self.layers, self.layers[1:]):
            if c_out != c_in:
                raise ValueError(f"channel chain broken: {c_out} -> {c_in}")

    @classmethod
    def from_channels(cls, n: int, channels: Sequence[int] = COMPRESSOR_CHANNELS, kernel: int = 3,
                      include_final_pointwise: bool = True, in_channels: int = 1) -> "ConvFlopsConfig":
        chain = [in_channels, *channels]
        layers = tuple((chain[i], chain[i + 1], kernel) for i in range(len(channels)))
        return cls(n, layers, include_final_pointwise)


def flops_layer(cfg: LlmFlopsConfig) -> int:
    n, d, m, l = int(cfg.n), int(cfg.d), int(cfg.m), int(cfg.l)
    return 4 * n * d * d + 2 * n * n * d + l * n * m


def flops_llm(cfg: LlmFlopsConfig) -> int:
    return int(cfg.n_layers_lm) * flops_layer(cfg)


def flops_attn(n: int, d: int) -> int:
    """Key projection of the visual tokens plus instruction-to-visual scores."""
    n, d = int(n), int(d)
    return n * d * d + n * d


def flops_conv(cfg: ConvFlopsConfig) -> int:
    n = int(cfg.n)
    total = sum(n * (c_in * k + c_in * c_out) for c_in, c_out, k in cfg.layers)
    if cfg.include_final_pointwise and cfg.layers:
        total += n * cfg.layers[-1][1]
    return total


@dataclass(frozen=True)
class FlopsReport:
    flops_llm: int
    flops_attn: int
    flops_conv: int
    total: int
    total_is_stated: bool

    def _ratio(self, x: int) -> Fraction:
        return Fraction(x, self.total) if self.total else Fraction(0)

    @property
    def attn_ratio(self) -> float:
        return float(self._ratio(self.flops_attn))

    @property
    def conv_ratio(self) -> float:
        return float(self._ratio(self.flops_conv))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["quantity", "value"])
        for name in ("flops_llm", "flops_attn", "flops_conv", "total"):
            w.writerow([name, getattr(self, name)])
        w.writerow(["total_is_stated", int(self.total_is_stated)])
        w.writerow(["attn_ratio", repr(self.attn_ratio)])
        w.writerow(["conv_ratio", repr(self.conv_ratio)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "FlopsReport":
        rows = dict(list(csv.reader(io.StringIO(text)))[1:])
        rep = cls(int(rows["flops_llm"]), int(rows["flops_attn"]), int(rows["flops_conv"]),
                  int(rows["total"]), bool(int(rows["total_is_stated"])))
        if float(rows["attn_ratio"]) != rep.attn_ratio or float(rows["conv_ratio"]) != rep.conv_ratio:
            raise ValueError("ratios in CSV do not match the integer totals")
        return rep

    def to_markdown(self) -> str:
        basis = "stated total" if self.total_is_stated else "computed FLOPs_LLM"
        lines = [
            "| quantity | FLOPs | TFLOPs | share of total |",
            "|---|---:|---:|---:|",
            f"| FLOPs_LLM | {self.flops_llm:,} | {self.flops_llm / 1e12:.4f} | |",
            f"| FLOPs_attn | {self.flops_attn:,} | {self.flops_attn / 1e12:.4f} | {100 * self.attn_ratio:.4f}% |",
            f"| FLOPs_conv | {self.flops_conv:,} | {self.flops_conv / 1e12:.6f} | {100 * self.conv_ratio:.6f}% |",
            "",
            f"Shares are relative to the {basis} ({self.total:,}).",
            "FLOPs_LLM uses the l*n*m FFN term as written; a 2*n*d*m-per-matrix count would be larger.",
        ]
        return "\n".join(lines) + "\n"


def report(llm_cfg: LlmFlopsConfig, conv_cfg: ConvFlopsConfig, stated_total: int | None = None) -> FlopsReport:
    llm = flops_llm(llm_cfg)
    attn = flops_attn(llm_cfg.n, llm_cfg.d)
    conv = flops_conv(conv_cfg)
    total = int(stated_total) if stated_total is not None else llm
    return FlopsReport(llm, attn, conv, total, stated_total is not None)

"""Copy-number detectability of assembled products.

An object needing `a` error-prone joining steps survives them all with
probability (1 - eps)^a, so the flawless copy count decays geometrically
in assembly depth. These helpers answer the three standing questions:
how many starting copies guarantee phi detectable survivors, what
per-step error a given start can tolerate, and where the bounds on a
plausible assembly index sit (ceil(log2 B) to B - 1 for B bonds).

The Monte Carlo model walks a population of 6.022e23 copies down 120
assembly steps under a drifting, trajectory-jittered error rate

    eps_s = clip(eps0 * exp(k (s - 1)) + E, 0, 1),  E ~ N(0, sigma) per
    trajectory, drawn once and shared across all eps0 rows,

so rows differ only through eps0 and pointwise ordering between rows is
preserved trajectory by trajectory. Randomness comes from a counter-based
(Philox) generator, making every cell of the result a pure function of
the seed.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np

from .jsonio import fmt_num

__all__ = [
    "N_AVOGADRO",
    "NotDetectable",
    "survival_fraction",
    "n_min",
    "max_error_for",
    "assembly_bounds",
    "check_realisable",
    "MonteCarloConfig",
    "MCResult",
    "monte_carlo",
    "detection_horizon",
    "mc_to_csv",
    "mc_to_svg",
]

N_AVOGADRO = 6.02214076e23

DEFAULT_EPS0 = (0.01, 0.015, 0.02, 0.03, 0.05, 0.06, 0.08, 0.10, 0.20, 0.50)


class NotDetectable(Exception):
    pass


def survival_fraction(eps: float, a: int) -> float:
    """Fraction of copies that come through `a` steps flawless."""
    if not 0.0 <= eps <= 1.0:
        raise ValueError(f"error rate must lie in [0, 1], got {eps}")
    if a < 0:
        raise ValueError("assembly index must be non-negative")
    return (1.0 - eps) ** a

def n_min(phi: float, eps_list) -> float:
    """Starting copies needed so phi survive the given per-step errors.
    Infinite when any step is certain to fail (or the survival product
    underflows to zero)."""
    if phi <= 0:
        raise ValueError("detection threshold must be positive")
    denom = 1.0
    for eps in eps_list:
        if not 0.0 <= eps <= 1.0:
            raise ValueError(f"error rate must lie in [0, 1], got {eps}")
        denom *= 1.0 - eps
    if denom <= 0.0:
        return math.inf
    return phi / denom


def max_error_for(phi: float, n: float, a: int) -> float:
    """Largest uniform per-step error that still leaves phi of n copies
    after `a` steps. Raises NotDetectable when even flawless assembly
    cannot reach the threshold."""
    if phi <= 0 or a < 1:
        raise ValueError("need phi > 0 and a >= 1")
    if n < phi:
        raise NotDetectable(f"{fmt_num(n)} starting copies cannot yield "
                            f"{fmt_num(phi)} survivors")
    return 1.0 - (phi / n) ** (1.0 / a)


def assembly_bounds(bonds: int) -> tuple[int, int]:
    """(lower, upper) bounds on the assembly index of an object with
    `bonds` joints: reuse at best halves the work per step, no reuse
    means one joint per step."""
    if bonds < 1:
        raise ValueError("an object needs at least one bond")
    if bonds == 1:
        return (0, 0)
    return ((bonds - 1).bit_length(), bonds - 1)


def check_realisable(species, produced_perfect: float, phi: float
                     ) -> tuple[bool, str | None]:
    """Gate for claiming a synthesis made a detectable product: the species
    must be stable and the flawless copy count must clear the threshold."""
    if not species.stable:
        return False, f"{species.id} is not stable enough to isolate"
    if produced_perfect < phi:
        return False, (f"{fmt_num(produced_perfect)} flawless copies is below "
                       f"the detection threshold {fmt_num(phi)}")
    return True, None


# ---------------------------------------------------------------------------
# Monte Carlo

@dataclass(frozen=True)
class MonteCarloConfig:
    eps0_values: tuple[float, ...] = DEFAULT_EPS0
    drift_rate: float = 0.02        # k in eps0 * exp(k (s-1))
    jitter_sd: float = 0.005        # sigma of the per-trajectory offset
    n0: float = N_AVOGADRO
    n_trajectories: int = 5000
    ai_max: int = 120
    seed: int = 0


@dataclass
class MCResult:
    config: MonteCarloConfig
    assembly_indices: list[int]
    mean_n: dict[float, np.ndarray] = field(default_factory=dict)

    def row(self, eps0: float) -> np.ndarray:
        return self.mean_n[eps0]


def monte_carlo(config: MonteCarloConfig | None = None) -> MCResult:
    config = config or MonteCarloConfig()
    rng = np.random.Generator(np.random.Philox(config.seed))
    # one offset per trajectory, shared across every eps0 row
    offsets = rng.normal(0.0, config.jitter_sd, size=config.n_trajectories) \
        if config.jitter_sd > 0 else np.zeros(config.n_trajectories)
    steps = np.arange(1, config.ai_max + 1, dtype=np.float64)
    drift = np.exp(config.drift_rate * (steps - 1.0))
    result = MCResult(config, list(range(1, config.ai_max + 1)))
    for eps0 in config.eps0_values:
        eps = np.clip(eps0 * drift[None, :] + offsets[:, None], 0.0, 1.0)
        survival = np.cumprod(1.0 - eps, axis=1)
        result.mean_n[eps0] = config.n0 * survival.mean(axis=0)
    return result


def detection_horizon(result: MCResult, phi: float = 1.0) -> dict[float, int | None]:
    """Per eps0, the smallest assembly index whose mean copy number falls
    below phi; None when the population stays detectable throughout."""
    out: dict[float, int | None] = {}
    for eps0, row in result.mean_n.items():
        below = np.nonzero(row < phi)[0]
        out[eps0] = int(below[0]) + 1 if below.size else None
    return out


def mc_to_csv(result: MCResult) -> str:
    buf = io.StringIO()
    buf.write("eps0,assembly_index,mean_N\n")
    for eps0 in result.config.eps0_values:
        row = result.mean_n[eps0]
        for a, value in zip(result.assembly_indices, row):
            buf.write(f"{fmt_num(eps0)},{a},{fmt_num(float(value))}\n")
    return buf.getvalue()


_PALETTE = (
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
)

_DISPLAY_FLOOR = 1e-30


def mc_to_svg(result: MCResult, phi: float = 1.0,
              title: str = "Flawless copies vs assembly index") -> str:
    """Self-contained SVG: log10 mean copy number against assembly index,
    one line per starting error rate, with the single-copy threshold."""
    width, height = 720.0, 480.0
    left, right, top, bottom = 64.0, 170.0, 40.0, 56.0
    plot_w = width - left - right
    plot_h = height - top - bottom
    a_min, a_max = 1, result.config.ai_max
    y_max = math.ceil(math.log10(result.config.n0))
    y_min = math.floor(math.log10(_DISPLAY_FLOOR))

    def x_of(a: float) -> float:
        return left + (a - a_min) / (a_max - a_min) * plot_w

    def y_of(logn: float) -> float:
        return top + (y_max - logn) / (y_max - y_min) * plot_h

    out = io.StringIO()
    out.write(
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {width:g} {height:g}" '
        f'font-family="Helvetica, Arial, sans-serif" font-size="12">\n')
    out.write(f'<rect width="{width:g}" height="{height:g}" fill="white"/>\n')
    out.write(f'<text x="{left:g}" y="22" font-size="15">{title}</text>\n')
    # axes
    out.write(f'<line x1="{left:g}" y1="{top:g}" x2="{left:g}" '
              f'y2="{top + plot_h:g}" stroke="black"/>\n')
    out.write(f'<line x1="{left:g}" y1="{top + plot_h:g}" x2="{left + plot_w:g}" '
              f'y2="{top + plot_h:g}" stroke="black"/>\n')
    for tick in range(int(y_min), int(y_max) + 1, 10):
        y = y_of(tick)
        out.write(f'<line x1="{left - 4:g}" y1="{y:.2f}" x2="{left:g}" '
                  f'y2="{y:.2f}" stroke="black"/>\n')
        out.write(f'<text x="{left - 8:g}" y="{y + 4:.2f}" '
                  f'text-anchor="end">1e{tick}</text>\n')
    for tick in range(0, a_max + 1, 20):
        a = max(tick, a_min)
        x = x_of(a)
        out.write(f'<line x1="{x:.2f}" y1="{top + plot_h:g}" x2="{x:.2f}" '
                  f'y2="{top + plot_h + 4:g}" stroke="black"/>\n')
        out.write(f'<text x="{x:.2f}" y="{top + plot_h + 18:g}" '
                  f'text-anchor="middle">{a}</text>\n')
    out.write(f'<text x="{left + plot_w / 2:.2f}" y="{height - 14:g}" '
              f'text-anchor="middle">assembly index</text>\n')
    out.write(f'<text x="16" y="{top + plot_h / 2:.2f}" text-anchor="middle" '
              f'transform="rotate(-90 16 {top + plot_h / 2:.2f})">'
              f'mean flawless copies</text>\n')
    # detection threshold
    y_phi = y_of(math.log10(max(phi, _DISPLAY_FLOOR)))
    out.write(f'<line x1="{left:g}" y1="{y_phi:.2f}" x2="{left + plot_w:g}" '
              f'y2="{y_phi:.2f}" stroke="#888" stroke-dasharray="5,4"/>\n')
    out.write(f'<text x="{left + plot_w - 4:g}" y="{y_phi - 5:.2f}" '
              f'text-anchor="end" fill="#666">detection threshold</text>\n')
    # one polyline per starting error rate
    for i, eps0 in enumerate(result.config.eps0_values):
        color = _PALETTE[i % len(_PALETTE)]
        points = []
        for a, value in zip(result.assembly_indices, result.mean_n[eps0]):
            logn = math.log10(max(float(value), _DISPLAY_FLOOR))
            points.append(f"{x_of(a):.2f},{y_of(logn):.2f}")
        out.write(f'<polyline fill="none" stroke="{color}" stroke-width="1.6" '
                  f'points="{" ".join(points)}"/>\n')
        ly = top + 14 + i * 18
        lx = left + plot_w + 16
        out.write(f'<line x1="{lx:g}" y1="{ly - 4:.2f}" x2="{lx + 22:g}" '
                  f'y2="{ly - 4:.2f}" stroke="{color}" stroke-width="3"/>\n')
        out.write(f'<text x="{lx + 28:g}" y="{ly:.2f}">eps0 = '
                  f'{fmt_num(eps0)}</text>\n')
    out.write("</svg>\n")
    return out.getvalue()

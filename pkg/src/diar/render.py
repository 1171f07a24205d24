"""Deterministic SVG rendering of maze episodes: walls as filled cells,
start marker in blue, goal marker in red, trajectory as a polyline."""

from __future__ import annotations

from pathlib import Path

from .maze import MazeSpec, goal_center

__all__ = ["render_episode_svg"]

_PX = 60  # pixels per maze length unit


def _fmt(x: float) -> str:
    return f"{x:.2f}"


def render_episode_svg(spec: MazeSpec, positions: list[list[float]], path) -> None:
    """Write one SVG; ``positions`` is the trajectory's (x, y) list, which
    may be empty to draw the maze alone."""
    w = spec.cols * spec.cell_size * _PX
    h = spec.rows * spec.cell_size * _PX
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_fmt(w)}" '
        f'height="{_fmt(h)}" viewBox="0 0 {_fmt(w)} {_fmt(h)}">',
        f'<rect width="{_fmt(w)}" height="{_fmt(h)}" fill="white"/>',
    ]
    s = spec.cell_size * _PX
    for r in range(spec.rows):
        for c in range(spec.cols):
            if spec.walls[r, c]:
                lines.append(
                    f'<rect x="{_fmt(c * s)}" y="{_fmt(r * s)}" width="{_fmt(s)}" '
                    f'height="{_fmt(s)}" fill="#444444"/>'
                )
    gx, gy = goal_center(spec)
    lines.append(
        f'<circle cx="{_fmt(gx * _PX)}" cy="{_fmt(gy * _PX)}" '
        f'r="{_fmt(spec.goal_radius * _PX)}" fill="#d62728" fill-opacity="0.8"/>'
    )
    if positions:
        pts = " ".join(f"{_fmt(p[0] * _PX)},{_fmt(p[1] * _PX)}" for p in positions)
        lines.append(
            f'<polyline points="{pts}" fill="none" stroke="#2ca02c" stroke-width="2"/>'
        )
        sx, sy = positions[0]
        lines.append(
            f'<circle cx="{_fmt(sx * _PX)}" cy="{_fmt(sy * _PX)}" r="6" fill="#1f77b4"/>'
        )
    lines.append("</svg>")
    Path(path).write_text("\n".join(lines) + "\n")

"""Render HAN attention weights: top-weighted units with per-word shading."""

from __future__ import annotations

import html
import json
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import Song
from .models import HierarchicalModel, han_forward, song_unit_tokens

# Single-hue scale: white at weight 0, this colour at the song's maximum word weight.
HUE = (33, 102, 172)
BASE = (255, 255, 255)


class NoAttentionError(TypeError):
    """The model has no attention weights to show."""


def top_units(weights: Sequence[float], k: int = 5) -> list[int]:
    """Indices of the ``k`` largest weights, descending; ties keep the earlier unit."""
    order = sorted(range(len(weights)), key=lambda i: (-weights[i], i))
    return order[:k]


def attention_report(model, song: Song, genres: Sequence[str], top_k: int = 5) -> dict:
    """Weights of ``han_forward`` for one song, trimmed to real units and words."""
    if not isinstance(model, HierarchicalModel) or not model.attend:
        raise NoAttentionError(
            f"model type {model.config.arch!r} has no attention weights; "
            "use a han-l or han-s checkpoint")
    cfg = model.config
    p, word_w, unit_w = han_forward(model, song)
    units = [u[: cfg.max_words]
             for u in song_unit_tokens(song, cfg.granularity, cfg.segment_breaks)[: cfg.max_units]]
    unit_weights = [float(unit_w[j]) for j in range(len(units))]
    word_weights = [[float(word_w[j, i]) for i in range(len(u))] for j, u in enumerate(units)]
    pred = int(np.argmax(p))
    return {
        "model": cfg.arch,
        "granularity": cfg.granularity,
        "predicted": genres[pred] if pred < len(genres) else str(pred),
        "probabilities": [float(x) for x in p],
        "genres": list(genres),
        "units": units,
        "unit_weights": unit_weights,
        "word_weights": word_weights,
        "top_units": top_units(unit_weights, top_k),
    }


def _shade(weight: float, max_weight: float) -> tuple[int, int, int]:
    t = 0.0 if max_weight <= 0 else min(max(weight / max_weight, 0.0), 1.0)
    return tuple(round(b + (h - b) * t) for b, h in zip(BASE, HUE))


def _max_word_weight(report: dict) -> float:
    return max((w for ws in report["word_weights"] for w in ws), default=0.0)


def render_html(report: dict) -> str:
    top = report["top_units"]
    wmax = _max_word_weight(report)
    rows = []
    for j in top:
        words = report["units"][j]
        if words:
            spans = " ".join(
                '<span class="word" style="background:rgb({},{},{})" title="{:.4f}">{}</span>'
                .format(*_shade(w, wmax), w, html.escape(tok))
                for tok, w in zip(words, report["word_weights"][j]))
        else:
            spans = '<span class="blank">&para; (segment break)</span>'
        rows.append(f'<div class="unit"><span class="uw">{report["unit_weights"][j]:.4f}</span>'
                    f'{spans}</div>')
    stops = ",".join("rgb({},{},{})".format(*_shade(t, 1.0)) for t in (0.0, 0.5, 1.0))
    return f"""<!DOCTYPE html>
<html><head><meta charset="utf-8"><title>Attention weights</title>
<style>
body {{ font-family: sans-serif; margin: 2em; }}
.unit {{ margin: .3em 0; white-space: nowrap; }}
.uw {{ display: inline-block; width: 5em; color: #555; font-family: monospace; }}
.word {{ padding: 0 .15em; border-radius: 2px; }}
.blank {{ color: #999; font-style: italic; }}
.legend {{ margin-top: 1.5em; font-size: .85em; }}
.bar {{ display: inline-block; width: 12em; height: .9em; vertical-align: middle;
        background: linear-gradient(to right, {stops}); border: 1px solid #ccc; }}
</style></head><body>
<h2>Predicted: {html.escape(report["predicted"])}</h2>
<p>Top {len(top)} {html.escape(report["granularity"])}s by attention weight.
Unit weights at left; words shaded by word-level weight.</p>
{chr(10).join(rows)}
<div class="legend">word weight: 0 <span class="bar"></span> {wmax:.4f}</div>
</body></html>
"""


def render_ansi(report: dict) -> str:
    wmax = _max_word_weight(report)
    lines = [f"Predicted: {report['predicted']}"]
    for j in report["top_units"]:
        words = report["units"][j]
        if words:
            text = " ".join("\x1b[48;2;{};{};{}m\x1b[38;2;0;0;0m{}\x1b[0m"
                            .format(*_shade(w, wmax), tok)
                            for tok, w in zip(words, report["word_weights"][j]))
        else:
            text = "\x1b[2m(segment break)\x1b[0m"
        lines.append(f"{report['unit_weights'][j]:.4f}  {text}")
    scale = "".join("\x1b[48;2;{};{};{}m  \x1b[0m".format(*_shade(t / 9, 1.0)) for t in range(10))
    lines.append(f"scale: 0 {scale} {wmax:.4f}")
    return "\n".join(lines) + "\n"


def write_visualization(report: dict, out_dir: str | Path, fmt: str = "html") -> tuple[Path, Path]:
    """Write the rendering and the JSON sidecar; returns both paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if fmt == "html":
        target = out_dir / "attention.html"
        target.write_text(render_html(report), encoding="utf-8")
    elif fmt == "ansi":
        target = out_dir / "attention.ansi"
        target.write_text(render_ansi(report), encoding="utf-8")
    else:
        raise ValueError(f"unknown format {fmt!r}; use 'html' or 'ansi'")
    sidecar = out_dir / "attention.json"
    sidecar.write_text(json.dumps(report, indent=1, ensure_ascii=False) + "\n", encoding="utf-8")
    return target, sidecar

"""Report bundle: metrics document, confusion tables, summary table and SVG charts.

Charts are written as plain SVG built with ElementTree, so the output is
always well-formed XML and no plotting library is needed.
"""

from __future__ import annotations

import json
import math
import xml.etree.ElementTree as ET
from pathlib import Path

from .loso import SUBSETS

SUBSET_TITLES = {"full_agreement": "Full agreement frames", "all_frames": "All frames"}
TRACK_TITLES = {"posture": "Posture track", "movement": "Movement track"}
PALETTE = ("#4477aa", "#ee6677", "#228833", "#ccbb44", "#66ccee", "#aa3377", "#bbbbbb", "#000000")


def dumps(doc: dict) -> str:
    """Canonical JSON text: sorted keys, fixed indentation, trailing newline."""
    return json.dumps(doc, sort_keys=True, indent=2, allow_nan=False) + "\n"


def _pct(v) -> str:
    return "n/a" if v is None else f"{100 * v:.1f}%"


def table1(report: dict) -> str:
    """Two blocks (full agreement, all frames) of ACC/UAR/UAP/UAF per track."""
    label_w = max(len(t) for t in list(SUBSET_TITLES.values()) + list(TRACK_TITLES.values())) + 2
    lines = []
    for subset in SUBSETS:
        header = SUBSET_TITLES[subset].ljust(label_w) + "".join(m.rjust(9) for m in ("ACC", "UAR", "UAP", "UAF"))
        lines.append(header)
        lines.append("-" * len(header))
        for track in ("posture", "movement"):
            block = report["tracks"].get(track)
            if block is None:
                continue
            s = block["subsets"][subset]
            lines.append(
                TRACK_TITLES[track].ljust(label_w) + "".join(_pct(s[m]).rjust(9) for m in ("acc", "uar", "uap", "uaf"))
            )
        lines.append("")
    return "\n".join(lines)


def confusion_csv(block: dict, subset: str) -> str:
    classes = block["classes"]
    counts = block["subsets"][subset]["confusion"]
    rows = ["truth\\pred," + ",".join(classes)]
    for name, row in zip(classes, counts):
        rows.append(name + "," + ",".join(str(int(v)) for v in row))
    return "\n".join(rows) + "\n"


def confusion_text(block: dict, subset: str) -> str:
    """Counts with row-normalised recall percentages, one row per truth class."""
    classes = block["classes"]
    counts = block["subsets"][subset]["confusion"]
    w = max(len(c) for c in classes) + 2
    out = ["".ljust(w) + "".join(c[:12].rjust(14) for c in classes)]
    for name, row in zip(classes, counts):
        total = sum(row)
        cells = [f"{v} ({100 * v / total:.0f}%)" if total else str(v) for v in row]
        out.append(name.ljust(w) + "".join(c.rjust(14) for c in cells))
    return "\n".join(out) + "\n"


# --- SVG helpers --------------------------------------------------------------


def _svg(width: int, height: int, title: str) -> ET.Element:
    root = ET.Element(
        "svg", xmlns="http://www.w3.org/2000/svg", width=str(width), height=str(height),
        viewBox=f"0 0 {width} {height}",
    )
    ET.SubElement(root, "rect", x="0", y="0", width=str(width), height=str(height), fill="white")
    _text(root, width / 2, 20, title, size=14, anchor="middle")
    return root


def _text(parent, x, y, s, size=11, anchor="start", rotate=None):
    attrs = {"x": f"{x:.1f}", "y": f"{y:.1f}", "font-size": str(size), "font-family": "sans-serif",
             "text-anchor": anchor}
    if rotate is not None:
        attrs["transform"] = f"rotate({rotate} {x:.1f} {y:.1f})"
    el = ET.SubElement(parent, "text", attrs)
    el.text = s
    return el


def _write_svg(root: ET.Element, path: Path) -> None:
    ET.ElementTree(root).write(path, encoding="utf-8", xml_declaration=True)


def bar_chart(groups: list[str], series: dict[str, list[float | None]], title: str, ylabel: str) -> ET.Element:
    """Grouped bars on a 0..1 axis; ``None`` values are drawn as missing."""
    names = list(series)
    n_groups = max(len(groups), 1)
    group_w = max(40, 18 * len(names) + 12)
    left, top, plot_h = 60, 40, 220
    width = left + n_groups * group_w + 160
    height = top + plot_h + 110
    root = _svg(width, height, title)
    for tick in range(6):
        y = top + plot_h * (1 - tick / 5)
        ET.SubElement(root, "line", x1=str(left), x2=str(left + n_groups * group_w), y1=f"{y:.1f}", y2=f"{y:.1f}",
                      stroke="#dddddd")
        _text(root, left - 6, y + 4, f"{tick / 5:.1f}", size=10, anchor="end")
    _text(root, 16, top + plot_h / 2, ylabel, anchor="middle", rotate=-90)
    bar_w = (group_w - 12) / max(len(names), 1)
    for g, gname in enumerate(groups):
        x0 = left + g * group_w + 6
        for k, name in enumerate(names):
            v = series[name][g]
            if v is None or (isinstance(v, float) and math.isnan(v)):
                continue
            h = plot_h * max(0.0, min(1.0, v))
            ET.SubElement(root, "rect", x=f"{x0 + k * bar_w:.1f}", y=f"{top + plot_h - h:.1f}",
                          width=f"{bar_w - 1:.1f}", height=f"{h:.1f}", fill=PALETTE[k % len(PALETTE)],
                          **{"class": "bar", "data-group": gname, "data-series": name})
        _text(root, x0 + group_w / 2 - 6, top + plot_h + 12, gname, size=10, anchor="end", rotate=-45)
    for k, name in enumerate(names):
        y = top + 14 * k
        lx = left + n_groups * group_w + 16
        ET.SubElement(root, "rect", x=str(lx), y=f"{y:.1f}", width="10", height="10", fill=PALETTE[k % len(PALETTE)])
        _text(root, lx + 14, y + 9, name, size=10)
    return root


def fscore_chart(report: dict) -> ET.Element:
    """Per-class F-scores of every track and subset on one grouped chart."""
    groups, series = [], {SUBSET_TITLES[s]: [] for s in SUBSETS}
    for track, block in report["tracks"].items():
        for i, c in enumerate(block["classes"]):
            groups.append(f"{track[0].upper()}: {c}")
            for s in SUBSETS:
                series[SUBSET_TITLES[s]].append(block["subsets"][s]["f"][i])
    return bar_chart(groups, series, "Per-class F-score", "F-score")


def ablation_chart(ablation: dict, track: str) -> ET.Element:
    configs = ablation["configs"]
    series = {
        SUBSET_TITLES[s]: [ablation["rows"][c][track][s] for c in configs] for s in SUBSETS
    }
    return bar_chart(configs, series, f"Sensor configurations ({track})", "UAR")


def profile_chart(report: dict, track: str) -> ET.Element:
    """Per-class relative frequency (log scale), one human/machine marker pair per subject."""
    block = report["tracks"][track]
    classes = block["classes"]
    profiles = block["profiles"]
    floor = 1e-4
    left, top, plot_h, col_w = 70, 40, 240, 90
    width = left + col_w * len(classes) + 140
    height = top + plot_h + 110
    root = _svg(width, height, f"Activity profiles ({track})")
    lo, hi = math.log10(floor), 0.0

    def ypos(v):
        v = max(v, floor)
        return top + plot_h * (hi - math.log10(v)) / (hi - lo)

    for e in range(int(lo), 1):
        y = ypos(10.0**e)
        ET.SubElement(root, "line", x1=str(left), x2=str(left + col_w * len(classes)), y1=f"{y:.1f}",
                      y2=f"{y:.1f}", stroke="#dddddd")
        _text(root, left - 6, y + 4, f"1e{e}", size=10, anchor="end")
    _text(root, 16, top + plot_h / 2, "relative frequency", anchor="middle", rotate=-90)
    subjects = sorted(profiles)
    for c, name in enumerate(classes):
        x0 = left + c * col_w + 10
        _text(root, x0 + col_w / 2 - 10, top + plot_h + 14, name, size=10, anchor="end", rotate=-45)
        for k, sid in enumerate(subjects):
            x = x0 + (col_w - 20) * (k + 0.5) / max(len(subjects), 1)
            yh = ypos(profiles[sid]["human"][c])
            ym = ypos(profiles[sid]["machine"][c])
            g = ET.SubElement(root, "g")
            ET.SubElement(g, "title").text = sid
            ET.SubElement(g, "line", x1=f"{x:.1f}", x2=f"{x:.1f}", y1=f"{yh:.1f}", y2=f"{ym:.1f}",
                          stroke="#888888")
            ET.SubElement(g, "circle", cx=f"{x:.1f}", cy=f"{yh:.1f}", r="3", fill=PALETTE[0])
            ET.SubElement(g, "rect", x=f"{x - 3:.1f}", y=f"{ym - 3:.1f}", width="6", height="6", fill=PALETTE[1])
    lx = left + col_w * len(classes) + 16
    ET.SubElement(root, "circle", cx=str(lx + 5), cy=str(top + 5), r="4", fill=PALETTE[0])
    _text(root, lx + 14, top + 9, "human majority", size=10)
    ET.SubElement(root, "rect", x=str(lx + 1), y=str(top + 17), width="8", height="8", fill=PALETTE[1])
    _text(root, lx + 14, top + 25, "classifier", size=10)
    return root


def confusion_heatmap(block: dict, subset: str, title: str) -> ET.Element:
    classes = block["classes"]
    counts = block["subsets"][subset]["confusion"]
    cell, left, top = 56, 120, 50
    n = len(classes)
    root = _svg(left + cell * n + 20, top + cell * n + 110, title)
    for i, row in enumerate(counts):
        total = sum(row)
        _text(root, left - 6, top + cell * i + cell / 2 + 4, classes[i], size=10, anchor="end")
        for j, v in enumerate(row):
            r = v / total if total else 0.0
            shade = int(255 - 200 * r)
            ET.SubElement(root, "rect", x=str(left + cell * j), y=str(top + cell * i), width=str(cell),
                          height=str(cell), fill=f"rgb({shade},{shade},255)", stroke="white")
            _text(root, left + cell * j + cell / 2, top + cell * i + cell / 2, str(int(v)), size=10, anchor="middle")
            if total:
                _text(root, left + cell * j + cell / 2, top + cell * i + cell / 2 + 12, f"{100 * r:.0f}%",
                      size=9, anchor="middle")
    for j, name in enumerate(classes):
        _text(root, left + cell * j + cell / 2, top + cell * n + 12, name, size=10, anchor="end", rotate=-45)
    return root


# --- bundles ------------------------------------------------------------------


def write_eval_bundle(report: dict, out: str | Path) -> Path:
    """metrics.json, confusion CSVs, table1.txt and fscores.svg under ``out``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(dumps(report))
    for track, block in report["tracks"].items():
        for subset in SUBSETS:
            (out / f"confusion_{track}_{subset}.csv").write_text(confusion_csv(block, subset))
    (out / "table1.txt").write_text(table1(report))
    _write_svg(fscore_chart(report), out / "fscores.svg")
    return out


def write_ablation_bundle(ablation: dict, out: str | Path) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(dumps(ablation))
    return out


class CorruptBundleError(ValueError):
    pass


def _load_json(path: Path) -> dict:
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CorruptBundleError(f"cannot read {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise CorruptBundleError(f"{path} is not a JSON object")
    return doc


def render_bundle(bundle: str | Path, out: str | Path | None = None) -> list[Path]:
    """Render profile, ablation and confusion figures for an eval and/or ablation bundle."""
    bundle = Path(bundle)
    out = Path(out) if out is not None else bundle
    out.mkdir(parents=True, exist_ok=True)
    metrics_path, ablation_path = bundle / "metrics.json", bundle / "ablation.json"
    if not metrics_path.exists() and not ablation_path.exists():
        raise CorruptBundleError(f"{bundle} contains neither metrics.json nor ablation.json")
    written = []
    try:
        if metrics_path.exists():
            report = _load_json(metrics_path)
            for track, block in report["tracks"].items():
                p = out / f"profile_{track}.svg"
                _write_svg(profile_chart(report, track), p)
                written.append(p)
                for subset in SUBSETS:
                    p = out / f"confusion_{track}_{subset}.svg"
                    _write_svg(confusion_heatmap(block, subset, f"{TRACK_TITLES[track]}, {SUBSET_TITLES[subset].lower()}"), p)
                    written.append(p)
                    p = out / f"confusion_{track}_{subset}.txt"
                    p.write_text(confusion_text(block, subset))
                    written.append(p)
            p = out / "table1.txt"
            p.write_text(table1(report))
            written.append(p)
        if ablation_path.exists():
            ablation = _load_json(ablation_path)
            tracks = [t for t in ("posture", "movement") if all(t in r for r in ablation["rows"].values())]
            for track in tracks:
                p = out / f"ablation_{track}.svg"
                _write_svg(ablation_chart(ablation, track), p)
                written.append(p)
    except (KeyError, TypeError, IndexError) as exc:
        raise CorruptBundleError(f"bundle is missing or has malformed field: {exc}") from None
    return written

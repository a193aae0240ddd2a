"""
Artifact writers. Every artifact embeds the originating config and the build
version: PGM comments, CSV '#' header lines or JSON keys.
"""

import json
import logging
import subprocess
from functools import lru_cache
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np
import pandas as pd

from . import __version__

logger = logging.getLogger(__name__)


@lru_cache(maxsize=1)
def build_version() -> str:
    """`git describe` of the source tree, or the package version outside a checkout."""
    try:
        result = subprocess.run(
            ["git", "describe", "--tags", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if result.returncode == 0 and result.stdout.strip():
            return result.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return f"switchdit-{__version__}"


def config_json(config) -> str:
    """Compact, key-sorted JSON of a pydantic config (or plain dict)."""
    data = config.model_dump(mode="json") if hasattr(config, "model_dump") else config
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def provenance_lines(config) -> List[str]:
    return [f"switchdit {build_version()}", f"config {config_json(config)}"]


def write_pgm(path: Path, image: np.ndarray, comments: Iterable[str] = (), lo: float = 0.0, hi: float = 1.0) -> Path:
    """Binary greyscale PGM (P5) with `lo` mapped to 0 and `hi` to 255."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError(f"PGM needs a 2-D array, got shape {image.shape}")
    pixels = np.floor((np.clip(image, lo, hi) - lo) / (hi - lo) * 255.0 + 0.5).astype(np.uint8)
    header = "P5\n"
    for comment in comments:
        for line in str(comment).splitlines():
            header += f"# {line}\n"
    header += f"{image.shape[1]} {image.shape[0]}\n255\n"
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(header.encode("ascii") + pixels.tobytes())
    logger.info(f"Wrote {path}")
    return path


def read_pgm(path: Path) -> np.ndarray:
    """Pixel values of a P5 file written by write_pgm, as uint8 (H, W)."""
    data = Path(path).read_bytes()
    lines, pos = [], 0
    while len(lines) < 3:
        end = data.index(b"\n", pos)
        line = data[pos:end].decode("ascii")
        pos = end + 1
        if not line.startswith("#"):
            lines.append(line)
    width, height = (int(v) for v in lines[1].split())
    return np.frombuffer(data[pos : pos + width * height], dtype=np.uint8).reshape(height, width)


def image_grid(images: np.ndarray, pad: int = 1) -> np.ndarray:
    """Tile (n, C, H, W) images (channel-averaged) into one 2-D array, padding at -1."""
    images = np.asarray(images, dtype=np.float64).mean(axis=1)
    n, H, W = images.shape
    cols = int(np.ceil(np.sqrt(n)))
    rows = int(np.ceil(n / cols))
    grid = np.full((rows * (H + pad) + pad, cols * (W + pad) + pad), -1.0)
    for i, img in enumerate(images):
        r, c = divmod(i, cols)
        top, left = pad + r * (H + pad), pad + c * (W + pad)
        grid[top : top + H, left : left + W] = img
    return grid


def write_map_pgm(path: Path, rows: np.ndarray, config, scale: int = 4, note: Optional[str] = None) -> Path:
    """Binary activation map (T x NM) as an upscaled PGM; column 0 is the first expert of block 0."""
    comments = provenance_lines(config) + ["rows are timesteps 1..T top to bottom, columns 0-based"]
    if note:
        comments.append(note)
    upscaled = np.kron(np.asarray(rows, dtype=np.float64), np.ones((scale, scale)))
    return write_pgm(path, upscaled, comments)


def write_csv(path: Path, frame: pd.DataFrame, config, note: Optional[str] = None) -> Path:
    """CSV with '#' provenance lines above the header row."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = provenance_lines(config) + ([note] if note else [])
    with open(path, "w", newline="") as f:
        for line in lines:
            f.write(f"# {line}\n")
        frame.to_csv(f, index=False, float_format="%.17g", lineterminator="\n")
    logger.info(f"Wrote {path}")
    return path


def read_csv(path: Path) -> pd.DataFrame:
    return pd.read_csv(path, comment="#")


def write_map_csv(path: Path, rows: np.ndarray, config, note: Optional[str] = None) -> Path:
    """T x NM 0/1 map, one row per timestep, columns named c0..c{NM-1}."""
    rows = np.asarray(rows, dtype=np.int64)
    frame = pd.DataFrame(rows, columns=[f"c{j}" for j in range(rows.shape[1])])
    frame.insert(0, "t", np.arange(1, rows.shape[0] + 1))
    return write_csv(path, frame, config, note or "columns are 0-based expert slots (block * M + expert)")


def write_json(path: Path, payload: dict, config) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    document = dict(payload)
    document["version"] = build_version()
    document["config"] = config.model_dump(mode="json") if hasattr(config, "model_dump") else config
    path.write_text(json.dumps(document, sort_keys=True, indent=2) + "\n")
    logger.info(f"Wrote {path}")
    return path


def render_routing_png(path: Path, panels: Sequence[tuple], title: Optional[str] = None) -> Path:
    """Side-by-side heatmaps of stacked activation maps, e.g. [("gate", W), ("prior", P)]."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    import seaborn as sns

    fig, axes = plt.subplots(1, len(panels), figsize=(4 * len(panels), 5), squeeze=False)
    for ax, (label, rows) in zip(axes[0], panels):
        sns.heatmap(np.asarray(rows), ax=ax, cbar=False, cmap="Greys", vmin=0, vmax=1)
        ax.set_title(label)
        ax.set_xlabel("expert slot")
        ax.set_ylabel("timestep")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    logger.info(f"Wrote {path}")
    return path

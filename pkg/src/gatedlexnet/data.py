"""Synthetic paragraph images, dataset files, preprocessing and augmentation.

Disk layout of a dataset::

    root/manifest.txt          key=value lines
    root/<split>/0000.pgm      binary 8-bit grayscale (P5)
    root/<split>/0000.txt      UTF-8, one transcript line per text line

Images are stored and handled as float arrays in ``[0, 1]`` with ink = 1 on
a 0 background, so zero padding adds blank paper.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .font import GLYPH_HEIGHT, GLYPH_WIDTH, RENDERABLE, glyph

FULL_HEIGHT = 480
FULL_WIDTH = 800

DEFAULT_VOCABULARY = (
    "the of and to in is it on as at be by he we an or so no up do go my me us if "
    "all can had her was one our out day get has him his how man new now old see two "
    "way who boy did its let put say she too use red sun cat dog top run big hot"
).split()


class DataError(Exception):
    """Malformed or inconsistent dataset content."""


@dataclass
class ParagraphSample:
    image: np.ndarray  # [1, H, W]
    lines: list[str]
    id: str

    def __eq__(self, other):
        return (
            isinstance(other, ParagraphSample)
            and self.id == other.id
            and self.lines == other.lines
            and self.image.shape == other.image.shape
            and bool(np.array_equal(self.image, other.image))
        )


@dataclass
class DatasetManifest:
    alphabet: str
    height: int
    width: int
    seed: int
    splits: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if len(set(self.alphabet)) != len(self.alphabet):
            raise DataError("alphabet has duplicate characters")

    def dumps(self) -> str:
        splits = ",".join(f"{k}:{v}" for k, v in self.splits.items())
        return (
            f"alphabet={json.dumps(self.alphabet, ensure_ascii=False)}\n"
            f"height={self.height}\nwidth={self.width}\nseed={self.seed}\nsplits={splits}\n"
        )

    @classmethod
    def loads(cls, text: str) -> "DatasetManifest":
        kv = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            if "=" not in line:
                raise DataError(f"manifest line {lineno}: expected key=value")
            k, v = line.split("=", 1)
            kv[k.strip()] = v.strip()
        try:
            splits = {}
            for item in filter(None, kv.get("splits", "").split(",")):
                name, n = item.split(":")
                splits[name] = int(n)
            return cls(json.loads(kv["alphabet"]), int(kv["height"]), int(kv["width"]), int(kv["seed"]), splits)
        except (KeyError, ValueError) as exc:
            raise DataError(f"bad manifest: {exc}") from exc


def encode(text: str, alphabet: str) -> list[int]:
    index = {c: i for i, c in enumerate(alphabet)}
    try:
        return [index[c] for c in text]
    except KeyError as exc:
        raise DataError(f"character {exc.args[0]!r} is not in the alphabet") from None


def decode(labels, alphabet: str) -> str:
    return "".join(alphabet[k] for k in labels)


# ---------------------------------------------------------------------------
# rendering


@dataclass
class RenderConfig:
    height: int = 64
    width: int = 256
    scale: int = 2
    line_gap: int = 6
    margin: int = 2
    jitter: int = 1


def render_line(text: str, scale: int = 2) -> np.ndarray:
    """Ink bitmap of one text line, one pixel column of spacing per glyph."""
    bad = sorted(set(text) - RENDERABLE)
    if bad:
        raise DataError(f"unrenderable characters: {bad}")
    adv = GLYPH_WIDTH + 1
    out = np.zeros((GLYPH_HEIGHT, max(adv * len(text), 1)))
    for k, ch in enumerate(text):
        out[:, k * adv : k * adv + GLYPH_WIDTH] = glyph(ch)
    return np.kron(out, np.ones((scale, scale)))


def max_line_chars(cfg: RenderConfig) -> int:
    return (cfg.width - 2 * cfg.margin - 2 * cfg.jitter) // ((GLYPH_WIDTH + 1) * cfg.scale)


def max_lines(cfg: RenderConfig) -> int:
    pitch = GLYPH_HEIGHT * cfg.scale + cfg.line_gap
    return (cfg.height - 2 * cfg.margin + cfg.line_gap - 2 * cfg.jitter) // pitch


def render_paragraph(lines: list[str], cfg: RenderConfig, rng: np.random.Generator) -> np.ndarray:
    """Render lines top to bottom with jittered baselines; returns ``[1, H, W]``."""
    if len(lines) > max_lines(cfg):
        raise DataError(f"{len(lines)} lines do not fit in height {cfg.height}")
    img = np.zeros((cfg.height, cfg.width))
    pitch = GLYPH_HEIGHT * cfg.scale + cfg.line_gap
    used = len(lines) * pitch - cfg.line_gap
    slack = cfg.height - 2 * cfg.margin - 2 * cfg.jitter - used
    top = cfg.margin + cfg.jitter + int(rng.integers(0, max(slack, 0) + 1))
    for k, text in enumerate(lines):
        bitmap = render_line(text, cfg.scale)
        y = top + k * pitch + int(rng.integers(-cfg.jitter, cfg.jitter + 1))
        x_slack = cfg.width - 2 * cfg.margin - bitmap.shape[1]
        if x_slack < 0:
            raise DataError(f"line {text!r} does not fit in width {cfg.width}")
        x = cfg.margin + int(rng.integers(0, min(x_slack, 4 * cfg.scale) + 1))
        ink = rng.uniform(0.8, 1.0)
        region = img[y : y + bitmap.shape[0], x : x + bitmap.shape[1]]
        np.maximum(region, ink * bitmap, out=region)
    return quantize(img)[None]


def quantize(img: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit grid so images survive a PGM round trip exactly."""
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def random_line(rng: np.random.Generator, vocabulary, max_chars: int, words=(1, 3)) -> str:
    n = int(rng.integers(words[0], words[1] + 1))
    out: list[str] = []
    for _ in range(n):
        w = vocabulary[int(rng.integers(len(vocabulary)))]
        if len(" ".join(out + [w])) > max_chars:
            break
        out.append(w)
    if not out:
        short = [w for w in vocabulary if len(w) <= max_chars]
        if not short:
            raise DataError("no vocabulary word fits on a line")
        out.append(short[int(rng.integers(len(short)))])
    return " ".join(out)


def generate_samples(
    seed: int,
    n_samples: int,
    lines_per_paragraph=(1, 3),
    vocabulary=DEFAULT_VOCABULARY,
    render: RenderConfig | None = None,
    words_per_line=(1, 3),
    prefix: str = "",
) -> list[ParagraphSample]:
    render = render or RenderConfig()
    lo, hi = lines_per_paragraph
    if not 1 <= lo <= hi:
        raise ValueError(f"bad lines_per_paragraph {lines_per_paragraph}")
    if hi > max_lines(render):
        raise DataError(f"at most {max_lines(render)} lines fit in height {render.height}")
    bad = sorted({c for w in vocabulary for c in w} - RENDERABLE)
    if bad:
        raise DataError(f"unrenderable characters: {bad}")
    rng = np.random.default_rng(seed)
    width_chars = max_line_chars(render)
    samples = []
    for k in range(n_samples):
        n_lines = int(rng.integers(lo, hi + 1))
        lines = [random_line(rng, vocabulary, width_chars, words_per_line) for _ in range(n_lines)]
        samples.append(ParagraphSample(render_paragraph(lines, render, rng), lines, f"{prefix}{k:04d}"))
    return samples


def alphabet_for(vocabulary) -> str:
    return "".join(sorted({c for w in vocabulary for c in w} | {" "}))


def synthesize(
    root,
    seed: int,
    splits: dict[str, int],
    lines_per_paragraph=(1, 3),
    vocabulary=DEFAULT_VOCABULARY,
    render: RenderConfig | None = None,
    words_per_line=(1, 3),
    alphabet: str | None = None,
) -> DatasetManifest:
    """Generate every split deterministically from ``seed`` and write it under ``root``."""
    render = render or RenderConfig()
    alphabet = alphabet or alphabet_for(vocabulary)
    missing = sorted({c for w in vocabulary for c in w} - set(alphabet))
    if missing:
        raise DataError(f"vocabulary characters missing from alphabet: {missing}")
    bad = sorted(set(alphabet) - RENDERABLE)
    if bad:
        raise DataError(f"unrenderable characters: {bad}")
    manifest = DatasetManifest(alphabet, render.height, render.width, seed, dict(splits))
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for k, (name, n) in enumerate(splits.items()):
        samples = generate_samples(seed * 1000 + k, n, lines_per_paragraph, vocabulary, render, words_per_line)
        write_split(root / name, samples)
    (root / "manifest.txt").write_text(manifest.dumps(), encoding="utf-8")
    return manifest


# ---------------------------------------------------------------------------
# file I/O


def write_pgm(path, image: np.ndarray) -> None:
    img = np.asarray(image).reshape(image.shape[-2:])
    data = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary 8-bit PGM as ``[1, H, W]`` floats in ``[0, 1]``."""
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise DataError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise DataError(f"{path}: only 8-bit PGM is supported")
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos)
    return (data.reshape(h, w) / 255.0)[None]


def write_split(directory, samples: list[ParagraphSample]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for s in samples:
        write_pgm(directory / f"{s.id}.pgm", s.image)
        (directory / f"{s.id}.txt").write_text("\n".join(s.lines) + "\n", encoding="utf-8")


def read_split(directory, alphabet: str | None = None) -> list[ParagraphSample]:
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"missing split directory {directory}")
    samples = []
    for txt in sorted(directory.glob("*.txt")):
        lines = txt.read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        if not lines or any(not ln for ln in lines):
            raise DataError(f"{txt}: empty transcript line")
        if alphabet is not None:
            for ln in lines:
                encode(ln, alphabet)
        samples.append(ParagraphSample(read_pgm(txt.with_suffix(".pgm")), lines, txt.stem))
    return samples


def read_manifest(root) -> DatasetManifest:
    path = Path(root) / "manifest.txt"
    if not path.is_file():
        raise DataError(f"no manifest at {path}")
    return DatasetManifest.loads(path.read_text(encoding="utf-8"))


def read_corpus(path) -> list[str]:
    return [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]


# ---------------------------------------------------------------------------
# preprocessing


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize a 2-D array with pixel-centre aligned bilinear interpolation."""
    h, w = img.shape
    if (out_h, out_w) == (h, w):
        return img.copy()
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = img[np.ix_(y0, x0)] * (1 - wx) + img[np.ix_(y0, x1)] * wx
    bot = img[np.ix_(y1, x0)] * (1 - wx) + img[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bot * wy


def preprocess(image: np.ndarray, height: int = FULL_HEIGHT, width: int = FULL_WIDTH) -> np.ndarray:
    """Aspect-preserving bilinear fit into ``height x width``, zero-padded bottom/right."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img[0]
    h, w = img.shape
    if h == 0 or w == 0:
        raise DataError("cannot preprocess a zero-area image")
    scale = min(height / h, width / w)
    new_h = min(height, max(1, int(round(h * scale))))
    new_w = min(width, max(1, int(round(w * scale))))
    out = np.zeros((height, width))
    out[:new_h, :new_w] = bilinear_resize(img, new_h, new_w)
    return np.clip(out, 0.0, 1.0)[None]


# ---------------------------------------------------------------------------
# augmentation

AUGMENTATIONS = ("resolution", "perspective", "dilation", "erosion", "brightness", "contrast")


@dataclass
class AugmentConfig:
    p_resolution: float = 0.2
    p_perspective: float = 0.2
    p_dilation: float = 0.2
    p_erosion: float = 0.2
    p_brightness: float = 0.2
    p_contrast: float = 0.2
    resolution_range: tuple[float, float] = (0.5, 0.9)
    perspective_strength: float = 0.05
    brightness_range: tuple[float, float] = (-0.2, 0.2)
    contrast_range: tuple[float, float] = (0.6, 1.4)

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(**{f"p_{name}": 0.0 for name in AUGMENTATIONS})


def rescale_resolution(img: np.ndarray, factor: float) -> np.ndarray:
    h, w = img.shape
    small = bilinear_resize(img, max(1, int(round(h * factor))), max(1, int(round(w * factor))))
    return bilinear_resize(small, h, w)


def _homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    rows = []
    rhs = []
    for (x, y), (u, v) in zip(src, dst):
        rows.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        rows.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        rhs += [u, v]
    h = np.linalg.solve(np.array(rows, float), np.array(rhs, float))
    return np.append(h, 1.0).reshape(3, 3)


def perspective_warp(img: np.ndarray, rng: np.random.Generator, strength: float) -> np.ndarray:
    h, w = img.shape
    corners = np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], float)
    moved = corners + rng.uniform(-strength, strength, size=(4, 2)) * [w, h]
    # map output pixels back into the source image
    inv = _homography(moved, corners)
    yy, xx = np.mgrid[0:h, 0:w]
    pts = inv @ np.stack([xx.ravel(), yy.ravel(), np.ones(h * w)])
    sx, sy = pts[0] / pts[2], pts[1] / pts[2]
    return ndimage.map_coordinates(img, [sy, sx], order=1, cval=0.0).reshape(h, w)


def dilate(img: np.ndarray, size: int = 3) -> np.ndarray:
    return ndimage.grey_dilation(img, size=(size, size))


def erode(img: np.ndarray, size: int = 3) -> np.ndarray:
    return ndimage.grey_erosion(img, size=(size, size))


def adjust_brightness(img: np.ndarray, delta: float) -> np.ndarray:
    return np.clip(img + delta, 0.0, 1.0)


def adjust_contrast(img: np.ndarray, factor: float) -> np.ndarray:
    mean = img.mean()
    return np.clip((img - mean) * factor + mean, 0.0, 1.0)


def augment(image: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig | None = None) -> np.ndarray:
    """Apply each transform with its own probability, in a fixed order (training only)."""
    cfg = cfg or AugmentConfig()
    img = np.asarray(image, dtype=np.float64)
    squeeze = img.ndim == 3
    if squeeze:
        img = img[0]
    if rng.random() < cfg.p_resolution:
        img = rescale_resolution(img, rng.uniform(*cfg.resolution_range))
    if rng.random() < cfg.p_perspective:
        img = perspective_warp(img, rng, cfg.perspective_strength)
    if rng.random() < cfg.p_dilation:
        img = dilate(img)
    if rng.random() < cfg.p_erosion:
        img = erode(img)
    if rng.random() < cfg.p_brightness:
        img = adjust_brightness(img, rng.uniform(*cfg.brightness_range))
    if rng.random() < cfg.p_contrast:
        img = adjust_contrast(img, rng.uniform(*cfg.contrast_range))
    img = np.clip(img, 0.0, 1.0)
    return img[None] if squeeze else img


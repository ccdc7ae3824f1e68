"""Training data: synthetic ordered sequences, image patch grids and PPM/PGM files."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .errors import FormatError, ShapeError
from .permcore import Permutation, SequenceSample, recover, sample_permutation


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SynthSpec:
    l: int = 4
    d: int = 8
    n_sequences: int = 2000
    noise_sigma: float = 0.05
    seed: int = 0
    min_gap: float = 0.01

    def __post_init__(self):
        if self.l < 2:
            raise ValueError("sequence length must be at least 2")
        if self.d < 1:
            raise ValueError("feature dimension must be positive")
        if self.n_sequences < 0:
            raise ValueError("n_sequences must be non-negative")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")


def _direction(rng: np.random.Generator, d: int) -> np.ndarray:
    w = rng.standard_normal(d)
    w /= np.linalg.norm(w)
    return w if w[0] >= 0 else -w


def generating_direction(spec: SynthSpec) -> np.ndarray:
    """The unit vector along which the latent attribute is embedded for ``spec``."""
    return _direction(np.random.default_rng(spec.seed), spec.d)


def _draw_attributes(rng, l, min_gap, max_tries=1000):
    for _ in range(max_tries):
        c = np.sort(rng.uniform(0.0, 1.0, l))
        if np.all(np.diff(c) >= min_gap):
            return c
    raise GenerationError(f"no {l} values in [0, 1] with gaps >= {min_gap} after {max_tries} draws")


def synth_generate(spec: SynthSpec) -> Iterator[SequenceSample]:
    """Yield ``spec.n_sequences`` ordered sequences driven by a hidden scalar attribute.

    Each element is ``c_i * w`` plus isotropic Gaussian noise of scale
    ``noise_sigma`` restricted to the ``d - 1`` directions orthogonal to the
    unit vector ``w``, which is drawn once per dataset.  Each sample also
    carries a uniformly drawn shuffling permutation.
    """
    rng = np.random.default_rng(spec.seed)
    w = _direction(rng, spec.d)
    for _ in range(spec.n_sequences):
        c = _draw_attributes(rng, spec.l, spec.min_gap)
        noise = rng.standard_normal((spec.l, spec.d)) * spec.noise_sigma
        noise -= np.outer(noise @ w, w)
        items = c[:, None] * w + noise
        yield SequenceSample(items, sample_permutation(spec.l, rng), c)


def synth_arrays(spec: SynthSpec):
    """Ordered items ``(N, l, d)``, attributes ``(N, l)`` and permutations ``(N, l)`` as arrays."""
    samples = list(synth_generate(spec))
    if not samples:
        return np.zeros((0, spec.l, spec.d)), np.zeros((0, spec.l)), np.zeros((0, spec.l), dtype=np.int64)
    return (
        np.stack([s.items for s in samples]),
        np.stack([s.criterion_value for s in samples]),
        np.stack([s.perm.pi for s in samples]),
    )


@dataclass
class Image:
    """8-bit image stored as ``pixels[row, col, channel]``."""

    pixels: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.pixels)
        if p.ndim == 2:
            p = p[:, :, None]
        if p.ndim != 3 or p.shape[2] not in (1, 3):
            raise ShapeError(f"image must be (height, width, 1 or 3), got {p.shape}")
        self.pixels = np.ascontiguousarray(p, dtype=np.uint8)

    @classmethod
    def from_buffer(cls, width: int, height: int, channels: int, buf) -> "Image":
        data = np.frombuffer(bytes(buf), dtype=np.uint8)
        if data.size != width * height * channels:
            raise ShapeError(f"buffer holds {data.size} samples, expected {width * height * channels}")
        return cls(data.reshape(height, width, channels))

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    def __eq__(self, other):
        return isinstance(other, Image) and np.array_equal(self.pixels, other.pixels)


@dataclass(frozen=True)
class PatchGridSpec:
    grid: int = 3
    patch_px: int = 64
    image_dir: Optional[str] = None
    jitter: bool = False

    def __post_init__(self):
        if self.grid < 2:
            raise ValueError("grid must be at least 2")
        if self.patch_px < 1:
            raise ValueError("patch_px must be positive")


def grid_split(img: Image, spec: PatchGridSpec, rng: Optional[np.random.Generator] = None) -> list:
    """Cut ``grid x grid`` patches in row-major cell order (index ``row * grid + col``).

    Patches come from the top-left corner of each cell unless ``spec.jitter``
    is set, in which case the offset inside the cell is drawn from ``rng``.
    """
    g, p = spec.grid, spec.patch_px
    if img.height < g * p or img.width < g * p:
        raise ShapeError(f"{img.width}x{img.height} image is too small for a {g}x{g} grid of {p}px patches")
    cell_h, cell_w = img.height // g, img.width // g
    if spec.jitter and rng is None:
        raise ValueError("jittered patch extraction needs an rng")
    patches = []
    for r in range(g):
        for c in range(g):
            dy = dx = 0
            if spec.jitter:
                dy = int(rng.integers(0, cell_h - p + 1))
                dx = int(rng.integers(0, cell_w - p + 1))
            y, x = r * cell_h + dy, c * cell_w + dx
            patches.append(img.pixels[y : y + p, x : x + p].copy())
    return patches


def reassemble(patches, perm: Permutation) -> Image:
    """Undo ``perm`` on a shuffled patch list and tile the result on its row-major grid."""
    n = len(patches)
    g = int(round(np.sqrt(n)))
    if g * g != n:
        raise ShapeError(f"{n} patches do not form a square grid")
    if perm.l != n:
        raise ShapeError(f"permutation of length {perm.l} for {n} patches")
    shape = np.asarray(patches[0]).shape
    if any(np.asarray(pt).shape != shape for pt in patches):
        raise ShapeError("patches differ in size")
    ordered = recover(perm, [np.asarray(pt) for pt in patches])
    rows = [np.concatenate(ordered[r * g : (r + 1) * g], axis=1) for r in range(g)]
    return Image(np.concatenate(rows, axis=0))


def patch_features(patch, subtract_mean: bool = True) -> np.ndarray:
    """Flatten a patch to intensities in ``[0, 1]``, optionally centred on the patch mean."""
    v = np.asarray(patch, dtype=np.float64).reshape(-1) / 255.0
    if subtract_mean:
        v = v - v.mean()
    return v


def patch_sequences(images, spec: PatchGridSpec, subtract_mean: bool = True, rng=None) -> np.ndarray:
    """Ordered patch feature sequences ``(N, grid**2, patch_px**2 * channels)``."""
    return np.stack(
        [np.stack([patch_features(pt, subtract_mean) for pt in grid_split(img, spec, rng)]) for img in images]
    )


def procedural_image(rng: np.random.Generator, size: int = 192, channels: int = 3, vignette: float = 0.6) -> Image:
    """A smooth colour gradient with a few filled discs and rectangles, darkened towards the corners.

    The radial ``vignette`` fall-off is the only layout cue shared by all
    images; gradient direction, colours and shapes are random.
    """
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    angle = rng.uniform(0, 2 * np.pi)
    t = np.cos(angle) * xx + np.sin(angle) * yy
    t = (t - t.min()) / (t.max() - t.min())
    c0 = rng.uniform(0, 255, channels)
    c1 = rng.uniform(0, 255, channels)
    img = c0 + (c1 - c0) * t[..., None]
    for _ in range(int(rng.integers(2, 5))):
        color = rng.uniform(0, 255, channels)
        cy, cx = rng.uniform(0, size, 2)
        r = rng.uniform(0.08, 0.25) * size
        if rng.random() < 0.5:
            mask = (yy * (size - 1) - cy) ** 2 + (xx * (size - 1) - cx) ** 2 <= r * r
        else:
            mask = (np.abs(yy * (size - 1) - cy) <= r) & (np.abs(xx * (size - 1) - cx) <= 0.7 * r)
        img[mask] = color
    r2 = ((yy - 0.5) ** 2 + (xx - 0.5) ** 2) / 0.5
    img *= (1.0 - vignette * r2)[..., None]
    return Image(np.clip(np.rint(img), 0, 255).astype(np.uint8))


def save_pixmap(img: Image, path) -> None:
    """Write a binary PGM (1 channel) or PPM (3 channels) with maxval 255."""
    magic = b"P5" if img.channels == 1 else b"P6"
    header = magic + b"\n%d %d\n255\n" % (img.width, img.height)
    Path(path).write_bytes(header + img.pixels.tobytes())


def parse_pixmap(buf: bytes) -> Image:
    if buf[:2] not in (b"P5", b"P6"):
        raise FormatError(f"bad magic {buf[:2]!r}, expected P5 or P6", 0)
    channels = 1 if buf[:2] == b"P5" else 3
    pos = 2
    fields = []
    while len(fields) < 3:
        # whitespace and '#' comments may separate header fields
        while pos < len(buf) and (buf[pos : pos + 1].isspace() or buf[pos : pos + 1] == b"#"):
            if buf[pos : pos + 1] == b"#":
                while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            else:
                pos += 1
        start = pos
        while pos < len(buf) and buf[pos : pos + 1].isdigit():
            pos += 1
        if pos == start:
            raise FormatError("expected a decimal header field", start)
        fields.append((int(buf[start:pos]), start))
    (width, _), (height, _), (maxval, maxval_at) = fields
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}", maxval_at)
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise FormatError("header must end with a single whitespace byte", pos)
    pos += 1
    need = width * height * channels
    if len(buf) - pos < need:
        raise FormatError(f"truncated pixel data: {len(buf) - pos} of {need} bytes", len(buf))
    data = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    return Image(data.reshape(height, width, channels))


def load_pixmap(path) -> Image:
    return parse_pixmap(Path(path).read_bytes())


def read_manifest(path) -> list:
    """Image paths listed one per line, resolved against the manifest's directory."""
    path = Path(path)
    base = path.parent
    out = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if line:
            out.append(base / line)
    return out


def write_manifest(path, image_paths) -> None:
    path = Path(path)
    lines = [str(Path(p).relative_to(path.parent)) if Path(p).is_absolute() else str(p) for p in image_paths]
    path.write_text("".join(f"{line}\n" for line in lines))

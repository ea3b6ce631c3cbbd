"""Synthetic slide cohorts with planted, class-dependent signals.

A slide is a bag of patches; each patch carries two view embeddings and a
list of synthetic nuclei. The class signal is planted in two separable
channels so ablations have something to measure:

* embeddings: a per-class mean shift plus a component correlated with the
  patch's realized nucleus composition, on top of isotropic noise;
* nuclei: per-class composition simplices decide which nucleus types appear,
  and nucleus type drives contour geometry, tile texture, and (via a
  class-modulated point process) spatial clustering.

Setting the shift to zero, making the simplices identical, and zeroing the
clustering modulation yields a null cohort with no label signal at all.

Everything is a pure function of (spec, label, seed): slides draw from a
generator seeded by the master seed and the slide index, so cohorts are
bit-reproducible. The on-disk container is a little-endian binary format
(magic ``ARGC``) with a checksum per section; a JSON manifest sidecar records
the seed and the full spec.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .nucfeat import CLASS_NAMES, ONEHOT_CLASSES, Nucleus

MAGIC = b"ARGC"
VERSION = 1
PATCH_EXTENT = 1024  # px
_HEADER = struct.Struct("<4sIIII")

# Nucleus rendering constants, keyed by class. Nucleus appearance depends only
# on the nucleus's own class; the slide label enters through composition and
# clustering, never directly.
_SEMI_MAJOR = {"tumor": 7.0, "inflammatory": 3.2, "stroma": 5.2, "necrosis": 4.5, "epithelial": 5.6}
_AXIS_RATIO = {"tumor": 0.78, "inflammatory": 0.92, "stroma": 0.45, "necrosis": 0.70, "epithelial": 0.80}
_TILE_BASE = {"tumor": 110.0, "inflammatory": 70.0, "stroma": 150.0, "necrosis": 185.0, "epithelial": 125.0}
_TILE_SMOOTH = {"tumor": 0, "inflammatory": 1, "stroma": 2, "necrosis": 1, "epithelial": 1}
_TILE_CONTRAST = {"tumor": 70.0, "inflammatory": 35.0, "stroma": 25.0, "necrosis": 50.0, "epithelial": 45.0}

_DEFAULT_SIMPLICES = (
    (0.62, 0.14, 0.14, 0.10),
    (0.30, 0.18, 0.22, 0.30),
    (0.14, 0.32, 0.36, 0.18),
    (0.25, 0.25, 0.25, 0.25),
)


class SpecError(ValueError):
    """Invalid cohort specification."""


class FormatError(ValueError):
    """Corrupt or incompatible cohort container."""


@dataclass
class PatchRecord:
    patch_id: int
    grid_row: int
    grid_col: int
    f_macro: np.ndarray
    f_meso: np.ndarray
    nuclei: list


@dataclass
class SlideRecord:
    slide_id: int
    label: int
    patches: list


@dataclass(frozen=True)
class CohortSpec:
    """Every tunable of the generator; hashes into the cohort manifest."""

    classes: int = 3
    slides_per_class: int = 20
    d: int = 64
    patches_per_slide: tuple = (5, 9)
    nuclei_per_patch: tuple = (25, 55)
    simplices: tuple = _DEFAULT_SIMPLICES[:3]
    necrosis_rate: float = 0.05
    embed_shift: tuple = (0.6, 0.6, 0.6)
    embed_noise: float = 1.0
    comp_coupling: float = 0.6
    cluster_mean: float = 3.0
    cluster_std: float = 60.0
    cluster_class_mod: float = 0.5
    seed: int = 7

    def validate(self):
        if self.classes < 2:
            raise SpecError("need at least 2 classes")
        if self.slides_per_class < 1:
            raise SpecError("slides_per_class must be >= 1")
        if self.d < 2:
            raise SpecError("embedding width must be >= 2")
        for name, rng_ in (("patches_per_slide", self.patches_per_slide),
                           ("nuclei_per_patch", self.nuclei_per_patch)):
            lo, hi = rng_
            if lo > hi or lo < (1 if name == "patches_per_slide" else 0):
                raise SpecError(f"{name} range {rng_} is empty or invalid")
        if len(self.simplices) != self.classes or len(self.embed_shift) != self.classes:
            raise SpecError("simplices and embed_shift must have one entry per class")
        for s in self.simplices:
            if len(s) != len(ONEHOT_CLASSES) or any(p < 0 for p in s) or abs(sum(s) - 1.0) > 1e-9:
                raise SpecError(f"composition simplex {s} must be 4 nonnegative proportions summing to 1")
        if not (0.0 <= self.necrosis_rate < 1.0):
            raise SpecError("necrosis_rate must be in [0, 1)")
        if self.embed_noise < 0 or self.cluster_std <= 0 or self.cluster_mean < 0:
            raise SpecError("noise and clustering parameters must be nonnegative (cluster_std positive)")
        if self.seed < 0:
            raise SpecError("seed must be nonnegative")
        return self

    def to_json(self):
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    def hash(self):
        return hashlib.sha256(self.to_json().encode()).hexdigest()


def default_spec(**overrides):
    base = dataclasses.asdict(CohortSpec())
    base.update(overrides)
    classes = base["classes"]
    if "simplices" not in overrides:
        base["simplices"] = tuple(_DEFAULT_SIMPLICES[c % 4] for c in range(classes))
    if "embed_shift" not in overrides:
        base["embed_shift"] = tuple(0.6 for _ in range(classes))
    for key in ("patches_per_slide", "nuclei_per_patch", "simplices", "embed_shift"):
        val = base[key]
        base[key] = tuple(tuple(v) if isinstance(v, (list, tuple)) and key == "simplices" else v for v in val)
    return CohortSpec(**base).validate()


def null_spec(base=None, **overrides):
    """A copy of ``base`` with every label-dependent signal removed."""
    base = base or default_spec(**overrides)
    flat = _DEFAULT_SIMPLICES[3]
    return dataclasses.replace(
        base,
        simplices=tuple(flat for _ in range(base.classes)),
        embed_shift=tuple(0.0 for _ in range(base.classes)),
        cluster_class_mod=0.0,
    ).validate()


class _SignalModel:
    """Class-level embedding directions and the composition coupling map.

    Derived from the master seed only, so every slide of a class shares the
    same planted directions.
    """

    def __init__(self, spec):
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 761]))
        self.dir_macro = [_unit(rng.normal(size=spec.d)) for _ in range(spec.classes)]
        self.dir_meso = [_unit(rng.normal(size=spec.d)) for _ in range(spec.classes)]
        k = len(ONEHOT_CLASSES)
        self.comp_map_macro = rng.normal(size=(k, spec.d)) / np.sqrt(k)
        self.comp_map_meso = rng.normal(size=(k, spec.d)) / np.sqrt(k)


def _unit(v):
    return v / np.linalg.norm(v)


def _sample_contour(rng, cls, center):
    m = 14
    scale = 0.8 + 0.4 * rng.uniform()
    a = _SEMI_MAJOR[cls] * scale
    b = a * _AXIS_RATIO[cls]
    theta = rng.uniform(0.0, np.pi)
    ang = np.linspace(0.0, 2.0 * np.pi, m, endpoint=False)
    jitter = 1.0 + 0.08 * rng.uniform(-1.0, 1.0, size=m)
    x = a * np.cos(ang) * jitter
    y = b * np.sin(ang) * jitter
    ct, st = np.cos(theta), np.sin(theta)
    pts = np.stack([ct * x - st * y, st * x + ct * y], axis=1)
    return pts + np.asarray(center)


def _box_blur(img):
    p = np.pad(img, 1, mode="edge")
    out = np.zeros_like(img)
    for dr in (0, 1, 2):
        for dc in (0, 1, 2):
            out += p[dr:dr + img.shape[0], dc:dc + img.shape[1]]
    return out / 9.0


def _sample_tile(rng, cls, contour):
    spans = contour.max(axis=0) - contour.min(axis=0)
    h = max(int(np.ceil(spans[1])) + 3, 5)
    w = max(int(np.ceil(spans[0])) + 3, 5)
    raw = rng.uniform(0.0, 1.0, size=(h, w))
    for _ in range(_TILE_SMOOTH[cls]):
        raw = _box_blur(raw)
    sd = raw.std()
    z = (raw - raw.mean()) / sd if sd > 0 else np.zeros_like(raw)
    tile = np.clip(_TILE_BASE[cls] + _TILE_CONTRAST[cls] * z, 0.0, 255.0)
    return np.round(tile).astype(np.uint8)


def _sample_patch_nuclei(rng, spec, label):
    n = int(rng.integers(spec.nuclei_per_patch[0], spec.nuclei_per_patch[1] + 1))
    label_frac = label / max(spec.classes - 1, 1)
    std = spec.cluster_std * (1.0 + spec.cluster_class_mod * label_frac)
    n_clusters = 1 + int(rng.poisson(spec.cluster_mean))
    centers = rng.uniform(64.0, PATCH_EXTENT - 64.0, size=(n_clusters, 2))
    simplex = np.asarray(spec.simplices[label], dtype=np.float64)

    nuclei = []
    for i in range(n):
        c = centers[int(rng.integers(n_clusters))]
        pos = np.clip(c + rng.normal(scale=std, size=2), 12.0, PATCH_EXTENT - 12.0)
        if rng.uniform() < spec.necrosis_rate:
            cls = "necrosis"
        else:
            cls = ONEHOT_CLASSES[int(rng.choice(len(ONEHOT_CLASSES), p=simplex))]
        contour = _sample_contour(rng, cls, pos)
        tile = _sample_tile(rng, cls, contour)
        nuclei.append(Nucleus(id=i, centroid=(float(pos[0]), float(pos[1])),
                              contour=contour, class_label=cls, intensity_tile=tile))
    return nuclei


def _composition(nuclei):
    counts = np.zeros(len(ONEHOT_CLASSES))
    for n in nuclei:
        if n.class_label != "necrosis":
            counts[ONEHOT_CLASSES.index(n.class_label)] += 1.0
    total = counts.sum()
    return counts / total if total > 0 else counts


def gen_slide(spec, label, seed, signal=None):
    """One synthetic slide, fully determined by (spec, label, seed)."""
    if not (0 <= label < spec.classes):
        raise SpecError(f"label {label} out of range for {spec.classes} classes")
    signal = signal or _SignalModel(spec)
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, int(seed)]))

    n_patches = int(rng.integers(spec.patches_per_slide[0], spec.patches_per_slide[1] + 1))
    grid_cols = int(np.ceil(np.sqrt(n_patches)))
    shift = spec.embed_shift[label]

    patches = []
    for p in range(n_patches):
        nuclei = _sample_patch_nuclei(rng, spec, label)
        comp = _composition(nuclei)
        macro = (shift * signal.dir_macro[label]
                 + spec.comp_coupling * (comp @ signal.comp_map_macro)
                 + spec.embed_noise * rng.normal(size=spec.d))
        meso = (shift * signal.dir_meso[label]
                + spec.comp_coupling * (comp @ signal.comp_map_meso)
                + spec.embed_noise * rng.normal(size=spec.d))
        patches.append(PatchRecord(patch_id=p, grid_row=p // grid_cols, grid_col=p % grid_cols,
                                   f_macro=macro, f_meso=meso, nuclei=nuclei))
    return SlideRecord(slide_id=int(seed), label=int(label), patches=patches)


def gen_cohort(spec):
    """Balanced cohort of ``classes * slides_per_class`` slides plus manifest."""
    spec.validate()
    signal = _SignalModel(spec)
    n = spec.classes * spec.slides_per_class
    slides = [gen_slide(spec, idx % spec.classes, idx, signal=signal) for idx in range(n)]
    counts = {}
    for s in slides:
        counts[s.label] = counts.get(s.label, 0) + 1
    manifest = {
        "format": MAGIC.decode(),
        "version": VERSION,
        "seed": spec.seed,
        "spec": json.loads(spec.to_json()),
        "spec_hash": spec.hash(),
        "slide_count": n,
        "class_counts": {str(k): counts[k] for k in sorted(counts)},
    }
    return slides, manifest


# -- binary container ---------------------------------------------------------
#
# header:  "ARGC" | u32 version | u32 n_slides | u32 d | u32 classes | u32 crc(header)
# slide:   body | u32 crc(body)
# body:    u8 label | u32 n_patches | patches
# patch:   u16 row | u16 col | d*f64 macro | d*f64 meso | u32 n_nuclei | nuclei
# nucleus: f64 cx | f64 cy | u8 class | u16 n_verts | n_verts*2*f64 | u16 tile_h | u16 tile_w | tile u8s
#
# All integers little-endian; slide ids and patch ids are positional.

_CLASS_CODE = {name: i for i, name in enumerate(CLASS_NAMES)}


def _nucleus_bytes(n):
    parts = [struct.pack("<ddBH", float(n.centroid[0]), float(n.centroid[1]),
                         _CLASS_CODE[n.class_label], n.contour.shape[0])]
    parts.append(np.ascontiguousarray(n.contour, dtype="<f8").tobytes())
    th, tw = n.intensity_tile.shape
    parts.append(struct.pack("<HH", th, tw))
    parts.append(n.intensity_tile.astype(np.uint8).tobytes())
    return b"".join(parts)


def _slide_body(slide, d):
    parts = [struct.pack("<BI", slide.label, len(slide.patches))]
    for p in slide.patches:
        parts.append(struct.pack("<HH", p.grid_row, p.grid_col))
        parts.append(np.ascontiguousarray(p.f_macro, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(p.f_meso, dtype="<f8").tobytes())
        parts.append(struct.pack("<I", len(p.nuclei)))
        parts.extend(_nucleus_bytes(n) for n in p.nuclei)
    return b"".join(parts)


def write_cohort(path, slides, spec, manifest=None):
    """Write the container plus a JSON manifest sidecar (``<path>.manifest.json``)."""
    d = spec.d
    header = _HEADER.pack(MAGIC, VERSION, len(slides), d, spec.classes)
    blob = [header, struct.pack("<I", zlib.crc32(header))]
    for s in slides:
        body = _slide_body(s, d)
        blob.append(body)
        blob.append(struct.pack("<I", zlib.crc32(body)))
    with open(path, "wb") as fh:
        fh.write(b"".join(blob))
    if manifest is None:
        manifest = {"format": MAGIC.decode(), "version": VERSION, "seed": spec.seed,
                    "spec": json.loads(spec.to_json()), "spec_hash": spec.hash(),
                    "slide_count": len(slides), "class_counts": {}}
    with open(str(path) + ".manifest.json", "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return manifest


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.at = 0

    def take(self, n, what):
        if self.at + n > len(self.buf):
            raise FormatError(f"truncated file: needed {n} bytes for {what} at offset {self.at}")
        out = self.buf[self.at:self.at + n]
        self.at += n
        return out

    def unpack(self, fmt, what):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size, what))


def read_cohort(path):
    """Parse a cohort container; raises :class:`FormatError` naming the byte offset."""
    with open(path, "rb") as fh:
        buf = fh.read()
    r = _Reader(buf)
    start = r.at
    magic, version, n_slides, d, classes = r.unpack("<4sIIII", "header")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r} at offset 0; not a cohort container")
    if version != VERSION:
        raise FormatError(f"unsupported container version {version} at offset 4")
    (crc,) = r.unpack("<I", "header checksum")
    if crc != zlib.crc32(buf[start:start + _HEADER.size]):
        raise FormatError(f"header checksum mismatch at offset {r.at - 4}")

    slides = []
    for si in range(n_slides):
        body_start = r.at
        label, n_patches = r.unpack("<BI", f"slide {si} header")
        if label >= classes:
            raise FormatError(f"slide {si} label {label} >= classes {classes} at offset {body_start}")
        patches = []
        for pi in range(n_patches):
            row, col = r.unpack("<HH", f"patch {pi} grid position")
            macro = np.frombuffer(r.take(8 * d, "macro embedding"), dtype="<f8").copy()
            meso = np.frombuffer(r.take(8 * d, "meso embedding"), dtype="<f8").copy()
            (n_nuc,) = r.unpack("<I", "nucleus count")
            nuclei = []
            for ni in range(n_nuc):
                cx, cy, code, n_verts = r.unpack("<ddBH", f"nucleus {ni} header")
                if code >= len(CLASS_NAMES):
                    raise FormatError(f"unknown nucleus class code {code} at offset {r.at - 3}")
                verts = np.frombuffer(r.take(16 * n_verts, "contour"), dtype="<f8").reshape(n_verts, 2).copy()
                th, tw = r.unpack("<HH", "tile dims")
                tile = np.frombuffer(r.take(th * tw, "tile"), dtype=np.uint8).reshape(th, tw).copy()
                nuclei.append(Nucleus(id=ni, centroid=(cx, cy), contour=verts,
                                      class_label=CLASS_NAMES[code], intensity_tile=tile))
            patches.append(PatchRecord(patch_id=pi, grid_row=row, grid_col=col,
                                       f_macro=macro, f_meso=meso, nuclei=nuclei))
        (crc,) = r.unpack("<I", f"slide {si} checksum")
        if crc != zlib.crc32(buf[body_start:r.at - 4]):
            raise FormatError(f"slide {si} checksum mismatch at offset {r.at - 4}")
        slides.append(SlideRecord(slide_id=si, label=label, patches=patches))
    if r.at != len(buf):
        raise FormatError(f"trailing garbage at offset {r.at}")
    return slides, {"version": version, "d": d, "classes": classes}


def expected_file_size(slides, d):
    """Exact byte size the container will occupy; part of the format contract."""
    total = _HEADER.size + 4
    for s in slides:
        total += 5 + 4  # label + patch count + slide crc
        for p in s.patches:
            total += 4 + 16 * d + 4
            for n in p.nuclei:
                total += 19 + 16 * n.contour.shape[0] + 4 + n.intensity_tile.size
    return total


def slides_equal(a, b):
    """Structural equality of two slide records (arrays compared exactly)."""
    if a.slide_id != b.slide_id or a.label != b.label or len(a.patches) != len(b.patches):
        return False
    for pa, pb in zip(a.patches, b.patches):
        if (pa.patch_id, pa.grid_row, pa.grid_col) != (pb.patch_id, pb.grid_row, pb.grid_col):
            return False
        if not (np.array_equal(pa.f_macro, pb.f_macro) and np.array_equal(pa.f_meso, pb.f_meso)):
            return False
        if len(pa.nuclei) != len(pb.nuclei):
            return False
        for na, nb in zip(pa.nuclei, pb.nuclei):
            if (na.id != nb.id or na.class_label != nb.class_label
                    or na.centroid != nb.centroid
                    or not np.array_equal(na.contour, nb.contour)
                    or not np.array_equal(na.intensity_tile, nb.intensity_tile)):
                return False
    return True


def cohorts_equal(a, b):
    return len(a) == len(b) and all(slides_equal(x, y) for x, y in zip(a, b))

"""Deterministic multi-style synthetic detection domains.

A scene is a layout of coloured shapes on a canvas. A style is a
geometry-preserving pixel transform applied on top of the canonical
rasterisation, so the same scene rendered in two styles is a pixel-aligned
cross-domain pair with identical boxes.
"""
from __future__ import annotations

import hashlib
import os
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

CATEGORY_NAMES = ("circle", "square", "triangle", "cross", "diamond", "ring")

# category -> base RGB; objects take these colours with probability `color_bias`
CATEGORY_COLORS = np.array([
    [0.90, 0.20, 0.20],
    [0.20, 0.85, 0.25],
    [0.25, 0.30, 0.95],
    [0.90, 0.85, 0.20],
    [0.85, 0.30, 0.85],
    [0.25, 0.85, 0.85],
])

ROLES = ("labeled_source", "unlabeled_source", "auxiliary", "target")


class DataError(ValueError):
    """Invalid dataset configuration or on-disk data."""


@dataclass(frozen=True)
class ObjectInstance:
    box: tuple  # (x_min, y_min, x_max, y_max), integer pixels, max exclusive
    category: int

    def __post_init__(self):
        x0, y0, x1, y1 = self.box
        if not (x0 < x1 and y0 < y1):
            raise DataError(f"degenerate box {self.box}")
        if self.category < 0:
            raise DataError(f"negative category {self.category}")


@dataclass(frozen=True)
class GeneratorConfig:
    canvas: tuple = (96, 96)  # (height, width)
    num_categories: int = 4
    objects: tuple = (1, 4)
    min_box: int = 12
    max_box: int = 36
    color_bias: float = 0.8
    color_jitter: float = 0.08

    def __post_init__(self):
        if not 1 <= self.num_categories <= len(CATEGORY_NAMES):
            raise DataError(f"num_categories must be in [1, {len(CATEGORY_NAMES)}]")
        lo, hi = self.objects
        if lo < 1 or hi < lo:
            raise DataError(f"bad object count range {self.objects}")
        if self.min_box < 2 or self.max_box < self.min_box:
            raise DataError("need 2 <= min_box <= max_box")


@dataclass(frozen=True)
class SceneSpec:
    scene_id: int
    canvas: tuple
    objects: tuple
    seed: int
    colors: tuple = ()
    background: float = 0.15

    @property
    def labels(self):
        return list(self.objects)


@dataclass(frozen=True)
class StyleSpec:
    """Named pixel transform.

    Recognised parameters (all optional): ``channel_perm`` (output channel i
    takes input channel ``perm[i]``), ``grayscale`` (mix weight towards
    luminance), ``gain``/``bias`` (per-channel affine colour map),
    ``invert``, ``edge`` (edge-emphasis strength), ``texture`` (one of
    none/stripes/checker), ``texture_amp``, ``texture_period`` and
    ``noise`` (Gaussian amplitude, seeded per scene and style).
    """

    style_id: str
    params: dict = field(default_factory=dict)

    _KNOWN = {"channel_perm", "grayscale", "gain", "bias", "invert", "edge",
              "texture", "texture_amp", "texture_period", "noise"}

    def __post_init__(self):
        unknown = set(self.params) - self._KNOWN
        if unknown:
            raise DataError(f"style {self.style_id!r}: unknown parameters {sorted(unknown)}")
        perm = self.params.get("channel_perm", (0, 1, 2))
        if sorted(perm) != [0, 1, 2]:
            raise DataError(f"style {self.style_id!r}: channel_perm must permute (0, 1, 2)")
        for key in ("gain", "bias"):
            if key in self.params and len(self.params[key]) != 3:
                raise DataError(f"style {self.style_id!r}: {key} needs one value per RGB channel")
        if self.params.get("texture", "none") not in ("none", "stripes", "checker"):
            raise DataError(f"style {self.style_id!r}: unknown texture {self.params['texture']!r}")

    def __hash__(self):
        return hash((self.style_id, repr(sorted(self.params.items()))))

    @property
    def is_permutation(self) -> bool:
        return set(self.params) <= {"channel_perm"}

    def inverse(self) -> "StyleSpec":
        if not self.is_permutation:
            raise DataError(f"style {self.style_id!r} is not an invertible channel permutation")
        perm = list(self.params.get("channel_perm", (0, 1, 2)))
        inv = [perm.index(i) for i in range(3)]
        return StyleSpec(self.style_id + "^-1", {"channel_perm": tuple(inv)})

    def apply(self, image: np.ndarray, noise_seed: int = 0) -> np.ndarray:
        p = self.params
        out = np.asarray(image, dtype=np.float64)
        if p.get("grayscale", 0.0):
            lum = out @ np.array([0.299, 0.587, 0.114])
            w = float(p["grayscale"])
            out = (1.0 - w) * out + w * lum[..., None]
        if "channel_perm" in p:
            out = out[..., list(p["channel_perm"])]
        if "gain" in p or "bias" in p:
            out = out * np.asarray(p.get("gain", (1.0, 1.0, 1.0))) + np.asarray(p.get("bias", (0.0, 0.0, 0.0)))
        if p.get("invert", False):
            out = 1.0 - out
        if p.get("edge", 0.0):
            lum = out.mean(axis=2)
            gy, gx = np.gradient(lum)
            mag = np.hypot(gx, gy)
            mag = mag / (mag.max() + 1e-12)
            out = out * (1.0 - float(p["edge"]) * mag[..., None])
        tex = p.get("texture", "none")
        if tex != "none":
            h, w = out.shape[:2]
            period = float(p.get("texture_period", 8))
            yy, xx = np.mgrid[0:h, 0:w]
            if tex == "stripes":
                pattern = np.sin(2 * np.pi * (xx + yy) / period)
            else:
                pattern = np.where(((xx // period) + (yy // period)) % 2 == 0, 1.0, -1.0)
            out = out + float(p.get("texture_amp", 0.1)) * pattern[..., None]
        if p.get("noise", 0.0):
            rng = np.random.default_rng([noise_seed, zlib.crc32(self.style_id.encode())])
            out = out + float(p["noise"]) * rng.standard_normal(out.shape)
        return np.clip(out, 0.0, 1.0)


DEFAULT_STYLES = {
    "A": {},
    "B": {"channel_perm": (1, 2, 0), "texture": "stripes", "texture_amp": 0.12,
          "texture_period": 6, "noise": 0.03},
    "C": {"channel_perm": (2, 0, 1), "gain": (0.75, 0.75, 0.75), "bias": (0.15, 0.15, 0.15),
          "texture": "checker", "texture_amp": 0.08, "texture_period": 8, "noise": 0.05},
    "D": {"channel_perm": (0, 2, 1), "grayscale": 0.5, "gain": (0.8, 0.8, 0.8),
          "bias": (0.12, 0.12, 0.12), "edge": 0.6, "noise": 0.03},
}


def default_styles():
    return {k: StyleSpec(k, dict(v)) for k, v in DEFAULT_STYLES.items()}


@dataclass
class RenderedSample:
    scene_id: int
    style_id: str
    image: np.ndarray  # H x W x 3 float in [0, 1]
    labels: Optional[list]  # None for unlabeled samples
    scene: Optional[SceneSpec] = field(default=None, repr=False, compare=False)


@dataclass(frozen=True)
class ManifestRecord:
    path: str
    scene_id: int
    style_id: str
    labeled: bool


@dataclass
class DatasetManifest:
    role: str
    records: list = field(default_factory=list)

    def __post_init__(self):
        if self.role not in ROLES:
            raise DataError(f"unknown manifest role {self.role!r}")

    def __len__(self):
        return len(self.records)

    @property
    def scene_ids(self):
        return [r.scene_id for r in self.records]

    @property
    def style_ids(self):
        return sorted({r.style_id for r in self.records})


# -- scenes -------------------------------------------------------------------

def scene_seed(dataset_seed: int, scene_id: int) -> int:
    return int(np.random.SeedSequence([dataset_seed, scene_id]).generate_state(1)[0])


def sample_scene(seed: int, gen_config: GeneratorConfig, scene_id: int = 0) -> SceneSpec:
    h, w = gen_config.canvas
    if min(h, w) < gen_config.min_box:
        raise DataError(f"canvas {gen_config.canvas} too small for min_box={gen_config.min_box}")
    rng = np.random.default_rng(seed)
    lo, hi = gen_config.objects
    n_target = int(rng.integers(lo, hi + 1))
    max_side = min(gen_config.max_box, h, w)
    # categories cycle through shuffled permutations: distinct within a scene when possible
    cat_order = np.concatenate([rng.permutation(gen_config.num_categories)
                                for _ in range(-(-hi // gen_config.num_categories))])
    objects, colors = [], []
    for k in range(n_target):
        for _attempt in range(50):
            bw = int(rng.integers(gen_config.min_box, max_side + 1))
            bh = int(rng.integers(gen_config.min_box, max_side + 1))
            x0 = int(rng.integers(0, w - bw + 1))
            y0 = int(rng.integers(0, h - bh + 1))
            box = (x0, y0, x0 + bw, y0 + bh)
            if all(not _overlaps(box, o.box, margin=2) for o in objects):
                break
        else:
            continue
        cat = int(cat_order[k])
        if rng.random() < gen_config.color_bias:
            base = CATEGORY_COLORS[cat]
        else:
            base = rng.uniform(0.2, 0.95, size=3)
        col = np.clip(base + rng.uniform(-gen_config.color_jitter, gen_config.color_jitter, 3), 0, 1)
        objects.append(ObjectInstance(box, cat))
        colors.append(tuple(float(c) for c in col))
    if not objects:  # unreachable for valid configs; keep the >= 1 invariant explicit
        raise DataError("failed to place any object")
    background = float(rng.uniform(0.05, 0.3))
    return SceneSpec(scene_id, (h, w), tuple(objects), seed, tuple(colors), background)


def _overlaps(a, b, margin=0):
    return not (a[2] + margin <= b[0] or b[2] + margin <= a[0]
                or a[3] + margin <= b[1] or b[3] + margin <= a[1])


def _shape_mask(category: int, box, canvas) -> np.ndarray:
    h, w = canvas
    x0, y0, x1, y1 = box
    yy, xx = np.mgrid[0:h, 0:w]
    px, py = xx + 0.5, yy + 0.5
    inside = (px >= x0) & (px < x1) & (py >= y0) & (py < y1)
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    rx, ry = (x1 - x0) / 2, (y1 - y0) / 2
    u, v = (px - cx) / rx, (py - cy) / ry  # in [-1, 1] inside the box
    name = CATEGORY_NAMES[category]
    if name == "circle":
        m = u ** 2 + v ** 2 <= 1.0
    elif name == "square":
        m = inside
    elif name == "triangle":
        # apex at top centre, base on the bottom edge
        m = np.abs(u) <= (v + 1.0) / 2.0
    elif name == "cross":
        m = (np.abs(u) <= 1 / 3) | (np.abs(v) <= 1 / 3)
    elif name == "diamond":
        m = np.abs(u) + np.abs(v) <= 1.0
    else:  # ring
        r2 = u ** 2 + v ** 2
        m = (r2 <= 1.0) & (r2 >= 0.35)
    return m & inside


def canonical_image(scene: SceneSpec) -> np.ndarray:
    h, w = scene.canvas
    img = np.full((h, w, 3), scene.background, dtype=np.float64)
    for obj, col in zip(scene.objects, scene.colors):
        mask = _shape_mask(obj.category, obj.box, scene.canvas)
        img[mask] = col
    return img


def render(scene: SceneSpec, style: StyleSpec, labeled: bool = True) -> RenderedSample:
    image = style.apply(canonical_image(scene), noise_seed=scene.seed)
    labels = list(scene.objects) if labeled else None
    return RenderedSample(scene.scene_id, style.style_id, image, labels, scene)


def stylize(sample: RenderedSample, target_style: StyleSpec, styles: Optional[dict] = None) -> RenderedSample:
    """Re-render ``sample``'s scene in ``target_style``; labels are carried over verbatim."""
    if styles is not None and target_style.style_id not in styles:
        raise DataError(f"unknown style {target_style.style_id!r}")
    if sample.scene is None:
        raise DataError("sample carries no scene; cannot re-render")
    out = render(sample.scene, target_style, labeled=sample.labels is not None)
    out.labels = None if sample.labels is None else list(sample.labels)
    return out


def style_distance(scenes: Sequence[SceneSpec], a: StyleSpec, b: StyleSpec) -> float:
    """Mean absolute per-channel pixel difference between two styles over ``scenes``."""
    diffs = [np.abs(render(s, a).image - render(s, b).image).mean() for s in scenes]
    return float(np.mean(diffs))


# -- manifests and protocol -------------------------------------------------

def build_auxiliary_domain(labeled: DatasetManifest, unlabeled_styles: Sequence[StyleSpec],
                           unlabeled: Sequence[DatasetManifest] = (),
                           labeled_style: Optional[StyleSpec] = None,
                           reverse: bool = False) -> DatasetManifest:
    """Forward: every labeled scene in every unlabeled style (labels transported).

    With ``reverse``, every unlabeled scene is also rendered in the labeled
    style, unlabeled.
    """
    if labeled.role != "labeled_source":
        raise DataError(f"expected a labeled_source manifest, got {labeled.role!r}")
    if not unlabeled_styles:
        raise DataError("empty unlabeled style list")
    records = []
    for style in unlabeled_styles:
        for r in labeled.records:
            records.append(ManifestRecord(_sample_path(style.style_id, r.scene_id),
                                          r.scene_id, style.style_id, True))
    if reverse:
        if labeled_style is None:
            raise DataError("reverse stylization needs the labeled style")
        for m in unlabeled:
            for r in m.records:
                records.append(ManifestRecord(_sample_path(labeled_style.style_id, r.scene_id),
                                              r.scene_id, labeled_style.style_id, False))
    return DatasetManifest("auxiliary", records)


def _sample_path(style_id, scene_id):
    return f"images/{style_id}/{scene_id:06d}.png"


def _label_path(style_id, scene_id, heldout=False):
    root = "heldout" if heldout else "labels"
    return f"{root}/{style_id}/{scene_id:06d}.txt"


def split_protocol(styles: Sequence[str], labeled: str, unlabeled: Sequence[str],
                   counts: dict, protocol: str = "dg", targets: Optional[Sequence[str]] = None):
    """Assign disjoint scene-id pools to S_L, S_U and T.

    Returns ``(S_L, [S_U...], [T...])``. In DG mode the targets are all styles
    not used as sources (or ``targets`` when given); in DA mode the targets
    are the unlabeled source styles.
    """
    styles = list(styles)
    sources = [labeled, *unlabeled]
    if len(styles) < 3:
        raise DataError("need at least 3 styles")
    if len(sources) < 2:
        raise DataError("need at least 2 source styles (one labeled, >=1 unlabeled)")
    if len(set(sources)) != len(sources):
        raise DataError(f"overlapping style assignment: {sources}")
    for s in sources:
        if s not in styles:
            raise DataError(f"style {s!r} not defined")
    if protocol == "dg":
        remaining = [s for s in styles if s not in sources]
        targets = remaining if targets is None else list(targets)
        overlap = set(targets) & set(sources)
        if overlap:
            raise DataError(f"DG targets overlap sources: {sorted(overlap)}")
        for t in targets:
            if t not in styles:
                raise DataError(f"style {t!r} not defined")
    elif protocol == "da":
        targets = list(unlabeled)
    else:
        raise DataError(f"unknown protocol {protocol!r}")
    if not targets:
        raise DataError("no target styles")

    n_l, n_u, n_t = counts["labeled"], counts["unlabeled"], counts["target"]
    next_id = 0
    s_l = DatasetManifest("labeled_source", [
        ManifestRecord(_sample_path(labeled, i), i, labeled, True) for i in range(n_l)])
    next_id += n_l
    s_u = []
    for style in unlabeled:
        ids = range(next_id, next_id + n_u)
        s_u.append(DatasetManifest("unlabeled_source", [
            ManifestRecord(_sample_path(style, i), i, style, False) for i in ids]))
        next_id += n_u
    # one target scene pool shared by every target style
    t_ids = range(next_id, next_id + n_t)
    tgts = [DatasetManifest("target", [
        ManifestRecord(_sample_path(style, i), i, style, False) for i in t_ids]) for style in targets]
    return s_l, s_u, tgts


def write_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# role: {manifest.role}", "path\tscene_id\tstyle_id\tlabeled"]
    lines += [f"{r.path}\t{r.scene_id}\t{r.style_id}\t{int(r.labeled)}" for r in manifest.records]
    path.write_text("\n".join(lines) + "\n")


def read_manifest(path) -> DatasetManifest:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("# role: "):
        raise DataError(f"{path}: missing role header")
    role = lines[0][len("# role: "):].strip()
    records = []
    for ln in lines[2:]:
        if not ln.strip():
            continue
        p, sid, style, lab = ln.split("\t")
        records.append(ManifestRecord(p, int(sid), style, lab == "1"))
    return DatasetManifest(role, records)


def write_labels(objects, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{o.box[0]} {o.box[1]} {o.box[2]} {o.box[3]} {o.category}\n" for o in objects))


def read_labels(path) -> list:
    out = []
    for ln in Path(path).read_text().splitlines():
        if ln.strip():
            x0, y0, x1, y1, c = (int(v) for v in ln.split())
            out.append(ObjectInstance((x0, y0, x1, y1), c))
    return out


def save_image(image: np.ndarray, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


@dataclass
class BuiltDataset:
    root: Path
    labeled: DatasetManifest
    unlabeled: list
    auxiliary: DatasetManifest
    targets: list

    def manifest_paths(self):
        return sorted(str(p) for p in (self.root / "manifests").glob("*.tsv"))


def build_dataset(root, styles: dict, labeled: str, unlabeled: Sequence[str], counts: dict,
                  gen_config: GeneratorConfig, seed: int, protocol: str = "dg",
                  targets: Optional[Sequence[str]] = None, reverse: bool = False,
                  min_style_distance: float = 0.0) -> BuiltDataset:
    """Render every split to ``root`` and write the manifests.

    Re-running with identical arguments rewrites identical bytes.
    """
    root = Path(root)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {root}: {exc}") from exc
    if not os.access(root, os.W_OK):
        raise DataError(f"output directory {root} is not writable")

    s_l, s_u, tgts = split_protocol(list(styles), labeled, unlabeled, counts, protocol, targets)
    if min_style_distance > 0:
        check_style_separation(styles, gen_config, seed, min_style_distance)
    aux = build_auxiliary_domain(s_l, [styles[u] for u in unlabeled], s_u, styles[labeled], reverse)

    def scene(i):
        return sample_scene(scene_seed(seed, i), gen_config, scene_id=i)

    for r in s_l.records:
        sc = scene(r.scene_id)
        save_image(render(sc, styles[r.style_id]).image, root / r.path)
        write_labels(sc.objects, root / _label_path(r.style_id, r.scene_id))
    for m in s_u:
        for r in m.records:
            save_image(render(scene(r.scene_id), styles[r.style_id]).image, root / r.path)
    for r in aux.records:
        sc = scene(r.scene_id)
        save_image(render(sc, styles[r.style_id]).image, root / r.path)
        if r.labeled:
            write_labels(sc.objects, root / _label_path(r.style_id, r.scene_id))
    for m in tgts:
        for r in m.records:
            sc = scene(r.scene_id)
            save_image(render(sc, styles[r.style_id]).image, root / r.path)
            # held out: only the evaluator reads these
            write_labels(sc.objects, root / _label_path(r.style_id, r.scene_id, heldout=True))

    mdir = root / "manifests"
    if mdir.exists():
        for old in mdir.glob("*.tsv"):
            old.unlink()
    write_manifest(s_l, mdir / "labeled_source.tsv")
    for m in s_u:
        write_manifest(m, mdir / f"unlabeled_source_{m.style_ids[0]}.tsv")
    write_manifest(aux, mdir / "auxiliary.tsv")
    for m in tgts:
        write_manifest(m, mdir / f"target_{m.style_ids[0]}.tsv")
    return BuiltDataset(root, s_l, s_u, aux, tgts)


def load_dataset(root) -> BuiltDataset:
    root = Path(root)
    mdir = root / "manifests"
    if not (mdir / "labeled_source.tsv").exists():
        raise DataError(f"no dataset at {root} (run build-data first)")
    s_l = read_manifest(mdir / "labeled_source.tsv")
    aux_path = mdir / "auxiliary.tsv"
    if not aux_path.exists():
        raise DataError(f"missing auxiliary manifest in {mdir}")
    s_u = [read_manifest(p) for p in sorted(mdir.glob("unlabeled_source_*.tsv"))]
    tgts = [read_manifest(p) for p in sorted(mdir.glob("target_*.tsv"))]
    return BuiltDataset(root, s_l, s_u, read_manifest(aux_path), tgts)


def load_split(root, manifest: DatasetManifest, heldout: bool = False):
    """Load images (N x H x W x 3 float32) and labels for every record.

    ``heldout=True`` reads target labels from the held-out sidecars; only the
    evaluation code should ask for that.
    """
    root = Path(root)
    images, labels = [], []
    for r in manifest.records:
        images.append(load_image(root / r.path))
        if r.labeled:
            labels.append(read_labels(root / _label_path(r.style_id, r.scene_id)))
        elif heldout:
            labels.append(read_labels(root / _label_path(r.style_id, r.scene_id, heldout=True)))
        else:
            labels.append(None)
    if not images:
        return np.zeros((0, 0, 0, 3), np.float32), labels
    return np.stack(images), labels


def check_style_separation(styles: dict, gen_config: GeneratorConfig, seed: int,
                           minimum: float, n_probe: int = 20) -> dict:
    probe = [sample_scene(scene_seed(seed, 10_000_000 + i), gen_config) for i in range(n_probe)]
    out = {}
    names = sorted(styles)
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            d = style_distance(probe, styles[a], styles[b])
            out[(a, b)] = d
            if d <= minimum:
                raise DataError(f"styles {a!r} and {b!r} too similar: {d:.4f} <= {minimum}")
    return out


def file_checksum(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()

"""Synthetic domain shift, SFDA scenarios, corruption and manifest files.

Synthetic geometry
------------------
Each class has a mean with two parts, both laid out on circles:

* a *semantic* part in a random 2-D subspace (radius ``radius``), which is
  the same in every domain, and
* a *style* part in a second, orthogonal 2-D subspace (radius
  ``style_radius``), which is class-correlated in the source domain.

A domain transform rotates the style plane by ``rotation``, scales its first
axis by ``scale`` and adds isotropic noise of std ``noise``. A classifier
trained on the source leans on the style cue and is misled once it rotates;
an encoder that only looks at the semantic plane is not.

Label access
------------
:class:`LabeledSet` counts every read of ``labels`` under the context set by
:func:`label_access`. The trainer runs under ``"optimization"`` and only
reads labels from inside nested ``"evaluation"`` blocks, so the audit shows
whether optimisation code ever touched a label.
"""
from __future__ import annotations

import contextlib
import contextvars
import math
import warnings
from collections import Counter
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

SETTINGS = ("closed", "open", "partial", "generalized", "sf-oodg")
MANIFEST_MAGIC = "#causal-sfda-manifest"
MANIFEST_VERSION = 1

_access_context: contextvars.ContextVar[str] = contextvars.ContextVar("label_access", default="unscoped")


@contextlib.contextmanager
def label_access(context: str):
    token = _access_context.set(context)
    try:
        yield
    finally:
        _access_context.reset(token)


class LabeledSet:
    def __init__(self, features, labels, class_names: Sequence[str], domain: str = ""):
        X = np.array(features, dtype=np.float64)
        y = np.array(labels, dtype=np.int64)
        if X.ndim != 2 or X.shape[0] < 1:
            raise ValueError("features must be a non-empty n x D matrix")
        if y.shape != (X.shape[0],):
            raise ValueError("need exactly one label per row")
        if np.any(y < 0) or np.any(y >= len(class_names)):
            raise ValueError("labels outside [0, C)")
        X.setflags(write=False)
        y.setflags(write=False)
        self.features = X
        self._labels = y
        self.class_names = list(class_names)
        self.domain = domain
        self.label_reads: Counter = Counter()

    @property
    def labels(self) -> np.ndarray:
        self.label_reads[_access_context.get()] += 1
        return self._labels

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def subset(self, idx, domain: str | None = None) -> "LabeledSet":
        idx = np.asarray(idx)
        return LabeledSet(self.features[idx], self._labels[idx], self.class_names,
                          self.domain if domain is None else domain)

    def with_features(self, features, domain: str | None = None) -> "LabeledSet":
        return LabeledSet(features, self._labels, self.class_names, self.domain if domain is None else domain)

    def with_labels(self, labels) -> "LabeledSet":
        return LabeledSet(self.features, labels, self.class_names, self.domain)

    def equals(self, other: "LabeledSet") -> bool:
        return (np.array_equal(self.features, other.features) and np.array_equal(self._labels, other._labels)
                and self.class_names == other.class_names and self.domain == other.domain)


# -- synthetic domains -------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticDomainSpec:
    n_classes: int = 5
    dim: int = 64
    radius: float = 6.0
    style_radius: float = 4.5
    cluster_std: float = 1.0
    rotation: float = 0.0
    scale: float = 1.0
    noise: float = 0.0
    samples_per_class: int = 200
    extra_classes: int = 0

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if self.dim < 4:
            raise ValueError("need dim >= 4 for the semantic and style planes")
        if self.noise < 0 or self.cluster_std < 0:
            raise ValueError("noise levels must be non-negative")
        if self.scale == 0:
            raise ValueError("scale must be non-zero so the transform stays invertible")
        if self.samples_per_class < 1 or self.extra_classes < 0:
            raise ValueError("invalid sample or class counts")

    def class_names(self, include_extra: bool = True) -> list[str]:
        n = self.n_classes + (self.extra_classes if include_extra else 0)
        return [f"class{c}" for c in range(n)]


@dataclass(frozen=True)
class DomainGeometry:
    """Basis columns: semantic u1, u2 then style w1, w2."""

    basis: np.ndarray
    semantic_means: np.ndarray
    style_means: np.ndarray

    @property
    def semantic_basis(self) -> np.ndarray:
        return self.basis[:, :2]

    @property
    def style_basis(self) -> np.ndarray:
        return self.basis[:, 2:4]

    def means(self) -> np.ndarray:
        return self.semantic_means + self.style_means


def make_geometry(spec: SyntheticDomainSpec, seed: int) -> DomainGeometry:
    if spec.radius == 0 and spec.n_classes > 1:
        warnings.warn("radius 0: all semantic class means coincide", RuntimeWarning, stacklevel=2)
    rng = np.random.default_rng([seed, 0])
    basis, _ = np.linalg.qr(rng.normal(size=(spec.dim, 4)))
    C, E = spec.n_classes, spec.extra_classes
    angles = 2 * np.pi * np.arange(C) / C
    radii = np.full(C, 1.0)
    if E:
        # Unknown classes sit between the known ones, outside their circle.
        angles = np.concatenate([angles, 2 * np.pi * (np.arange(E) + 0.5) / E])
        radii = np.concatenate([radii, np.full(E, 1.5)])
    circle = np.stack([np.cos(angles), np.sin(angles)], axis=1) * radii[:, None]
    semantic = spec.radius * circle @ basis[:, :2].T
    style = spec.style_radius * circle @ basis[:, 2:4].T
    return DomainGeometry(basis, semantic, style)


def domain_transform(geom: DomainGeometry, X: np.ndarray, rotation: float, scale: float) -> np.ndarray:
    Bs = geom.style_basis
    coords = X @ Bs
    c, s = math.cos(rotation), math.sin(rotation)
    R = np.array([[c, -s], [s, c]]) @ np.diag([scale, 1.0])
    return X + (coords @ R.T - coords) @ Bs.T


def _sample(spec, geom, rng, n_classes) -> tuple[np.ndarray, np.ndarray]:
    means = geom.means()[:n_classes]
    y = np.repeat(np.arange(n_classes), spec.samples_per_class)
    X = means[y] + spec.cluster_std * rng.normal(size=(y.size, spec.dim))
    return X, y


def sample_domain(spec: SyntheticDomainSpec, seed: int, rotation: float = 0.0, scale: float = 1.0,
                  noise: float = 0.0, stream: int = 1, domain: str = "", include_extra: bool = False,
                  geometry: DomainGeometry | None = None) -> LabeledSet:
    """Draw one domain of the family defined by ``(spec, seed)``."""
    geom = geometry or make_geometry(spec, seed)
    rng = np.random.default_rng([seed, stream])
    n = spec.n_classes + (spec.extra_classes if include_extra else 0)
    X, y = _sample(spec, geom, rng, n)
    X = domain_transform(geom, X, rotation, scale)
    if noise:
        X = X + noise * rng.normal(size=X.shape)
    return LabeledSet(X, y, spec.class_names(include_extra), domain)


def generate_domain_pair(spec: SyntheticDomainSpec, seed: int = 0) -> tuple[LabeledSet, LabeledSet]:
    geom = make_geometry(spec, seed)
    source = sample_domain(spec, seed, stream=1, domain="source", geometry=geom)
    target = sample_domain(spec, seed, spec.rotation, spec.scale, spec.noise, stream=2, domain="target",
                           include_extra=True, geometry=geom)
    return source, target


# (name, rotation, scale, noise): structural stand-ins for four shifted test suites.
SFOODG_PRESETS = (
    ("natural", 0.25 * math.pi, 1.0, 0.5),
    ("sketch", 0.5 * math.pi, 0.4, 0.0),
    ("adversarial", 0.75 * math.pi, 1.0, 1.0),
    ("rendition", 0.5 * math.pi, 1.6, 0.3),
)


def generate_variants(spec: SyntheticDomainSpec, seed: int = 0, presets=SFOODG_PRESETS) -> list[LabeledSet]:
    geom = make_geometry(spec, seed)
    return [sample_domain(spec, seed, rot, sc, eta, stream=10 + k, domain=name, geometry=geom)
            for k, (name, rot, sc, eta) in enumerate(presets)]


def generate_domain_sequence(spec: SyntheticDomainSpec, rotations: Sequence[float], seed: int = 0,
                             names: Sequence[str] | None = None) -> list[LabeledSet]:
    geom = make_geometry(spec, seed)
    names = names or [f"rot{k}" for k in range(len(rotations))]
    return [sample_domain(spec, seed, rot, spec.scale, spec.noise, stream=100 + k, domain=name, geometry=geom)
            for k, (rot, name) in enumerate(zip(rotations, names))]


# -- scenarios -------------------------------------------------------------------------

@dataclass(frozen=True)
class ScenarioSpec:
    setting: str = "closed"
    source_classes: tuple = ()
    target_classes: tuple = ()
    split_ratio: float = 0.9

    def __post_init__(self):
        if self.setting not in SETTINGS:
            raise ValueError(f"unknown setting {self.setting!r}; expected one of {SETTINGS}")
        if not 0 < self.split_ratio < 1:
            raise ValueError("split_ratio must lie in (0, 1)")
        object.__setattr__(self, "source_classes", tuple(sorted(int(c) for c in self.source_classes)))
        object.__setattr__(self, "target_classes", tuple(sorted(int(c) for c in self.target_classes)))

    def check_relation(self) -> None:
        cs, ct = set(self.source_classes), set(self.target_classes)
        ok = {
            "closed": cs == ct,
            "generalized": cs == ct,
            "sf-oodg": cs == ct,
            "open": cs < ct,
            "partial": cs > ct,
        }[self.setting]
        if not ok:
            raise ValueError(f"class sets {sorted(cs)} / {sorted(ct)} violate the {self.setting} relation")


@dataclass
class Scenario:
    spec: ScenarioSpec
    source: LabeledSet
    targets: list[LabeledSet]
    source_test: LabeledSet | None = None
    known_classes: tuple = ()

    @property
    def target(self) -> LabeledSet:
        return self.targets[0]


def _filter(s: LabeledSet, classes) -> LabeledSet:
    with label_access("scenario"):
        keep = np.isin(s.labels, list(classes))
    return s.subset(np.flatnonzero(keep))


def split_set(s: LabeledSet, ratio: float, seed: int) -> tuple[LabeledSet, LabeledSet]:
    """Seeded split into ``round(ratio * n)`` train rows and the rest."""
    perm = np.random.default_rng([seed, 7]).permutation(len(s))
    n_train = int(round(ratio * len(s)))
    return (s.subset(np.sort(perm[:n_train]), s.domain),
            s.subset(np.sort(perm[n_train:]), s.domain + "-test" if s.domain else "test"))


def build_scenario(pair: tuple[LabeledSet, LabeledSet], spec: ScenarioSpec, seed: int = 0,
                   variants: Sequence[LabeledSet] | None = None) -> Scenario:
    source, target = pair
    if not spec.source_classes or not spec.target_classes:
        cs = spec.source_classes or tuple(range(source.n_classes))
        ct = spec.target_classes or cs
        spec = replace(spec, source_classes=cs, target_classes=ct)
    spec.check_relation()
    cs, ct = spec.source_classes, spec.target_classes
    if max(cs) >= source.n_classes or max(ct) >= target.n_classes:
        raise ValueError("declared classes are not present in the data")
    src = _filter(source, cs)
    if spec.setting == "partial":
        tgt = [_filter(target, ct)]
    elif spec.setting == "sf-oodg":
        tgt = list(variants) if variants else [corrupt(target, k, seed) for k in (4, 8, 12, 16)]
        tgt = [_filter(t, ct) for t in tgt]
    else:
        tgt = [_filter(target, ct)]
    source_test = None
    if spec.setting == "generalized":
        src, source_test = split_set(src, spec.split_ratio, seed)
    return Scenario(spec, src, tgt, source_test, cs)


# -- corruption -------------------------------------------------------------------------

def corrupt(s: LabeledSet, level: float, seed: int = 0) -> LabeledSet:
    """Additive Gaussian noise with std ``level / 20`` times the feature std.

    The same seeded draw is used for every level, so the displacement grows
    linearly in ``level``.
    """
    if level < 0:
        raise ValueError("corruption level must be non-negative")
    if level == 0:
        return s.with_features(s.features)
    eps = np.random.default_rng([seed, 99]).normal(size=s.features.shape)
    std = float(s.features.std())
    name = f"{s.domain}+k{level:g}" if s.domain else f"k{level:g}"
    return s.with_features(s.features + (level / 20.0) * std * eps, name)


# -- manifests --------------------------------------------------------------------------
#
# Header:  #causal-sfda-manifest<TAB>version=1<TAB>D=<dim><TAB>C=<n><TAB>classes=a,b,...
# Record:  id<TAB>domain<TAB>label-name<TAB>f1<TAB>...<TAB>fD
# A record whose fourth field is "@path" loads its features from a .npy file
# (relative to the manifest) instead.

class ManifestError(ValueError):
    pass


def write_manifest(path, s: LabeledSet) -> None:
    for name in s.class_names:
        if any(ch in name for ch in ",\t\n") or not name:
            raise ManifestError(f"class name {name!r} cannot be written to a manifest")
    lines = [f"{MANIFEST_MAGIC}\tversion={MANIFEST_VERSION}\tD={s.dim}\tC={s.n_classes}\t"
             f"classes={','.join(s.class_names)}"]
    domain = s.domain or "-"
    for i, (x, y) in enumerate(zip(s.features, s._labels)):
        lines.append("\t".join([str(i), domain, s.class_names[y], *(repr(float(v)) for v in x)]))
    Path(path).write_text("\n".join(lines) + "\n")


def load_manifest(path) -> LabeledSet:
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"{path}: no such manifest")
    lines = path.read_text().splitlines()
    if not lines or not lines[0].startswith(MANIFEST_MAGIC):
        raise ManifestError(f"{path}:1: missing manifest header")
    fields = dict(f.split("=", 1) for f in lines[0].split("\t")[1:] if "=" in f)
    try:
        version = int(fields["version"])
        D = int(fields["D"])
        C = int(fields["C"])
        classes = fields["classes"].split(",")
    except (KeyError, ValueError) as exc:
        raise ManifestError(f"{path}:1: malformed header ({exc})") from None
    if version != MANIFEST_VERSION:
        raise ManifestError(f"{path}:1: unsupported manifest version {version}")
    if len(classes) != C:
        raise ManifestError(f"{path}:1: header declares C={C} but lists {len(classes)} classes")
    index = {name: k for k, name in enumerate(classes)}
    X, y, domains = [], [], set()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) < 4:
            raise ManifestError(f"{path}:{lineno}: expected id, domain, label and features")
        _, dom, label = parts[:3]
        if label not in index:
            raise ManifestError(f"{path}:{lineno}: unknown label {label!r}")
        if parts[3].startswith("@"):
            vec = np.load(path.parent / parts[3][1:]).astype(np.float64).ravel()
        else:
            try:
                vec = np.array([float(v) for v in parts[3:]])
            except ValueError:
                raise ManifestError(f"{path}:{lineno}: non-numeric feature value") from None
        if vec.size != D:
            raise ManifestError(f"{path}:{lineno}: expected {D} features, got {vec.size}")
        X.append(vec)
        y.append(index[label])
        domains.add(dom)
    if not X:
        raise ManifestError(f"{path}: no records")
    domain = domains.pop() if len(domains) == 1 else "mixed"
    return LabeledSet(np.stack(X), y, classes, "" if domain == "-" else domain)

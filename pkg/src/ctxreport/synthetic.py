"""Seeded synthetic image-feature / keyword / report datasets and their JSONL files.

Every sample draws a disease (which fixes the report template and the
one-hot direction of its image features) and four attributes (severity,
laterality, finding, location) that only the report and the keywords reveal.
All randomness comes from ``numpy.random.default_rng(seed)`` (PCG64), drawn
in a fixed order, so a seed reproduces a dataset on any platform.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .text import normalize

PRNG = "numpy.random.PCG64"
FORMAT = "ctxreport-dataset/1"

DISEASES = (
    "diabetic retinopathy",
    "macular degeneration",
    "central serous chorioretinopathy",
    "retinal vein occlusion",
    "retinitis pigmentosa",
    "neuroretinitis",
    "x-linked retinoschisis",
    "uveitis",
    "choroidal neovascularization",
    "macular hole",
    "vitelliform dystrophy",
    "chorioretinitis",
)

ATTRIBUTES = {
    "severity": ("mild", "moderate", "severe"),
    "laterality": ("unilateral", "bilateral"),
    "finding": ("hemorrhage", "exudate", "leakage", "edema", "atrophy", "drusen"),
    "location": ("macular", "peripheral", "temporal", "nasal", "superior", "inferior"),
}

# slot names in braces; everything else is constant template text
TEMPLATES = (
    "{severity} {disease} with {finding} changes in the {location} region of the {laterality} eye",
    "{laterality} {disease} showing {severity} {finding} near the {location} area",
    "the {location} retina shows {finding} consistent with {severity} {laterality} {disease}",
    "{disease} in the {laterality} eye with {severity} {location} {finding}",
)

SLOT_ORDER = ("disease", "severity", "laterality", "finding", "location")


@dataclass
class SyntheticSpec:
    num_samples: int = 1000
    num_diseases: int = 8
    feature_dim: int = 16
    noise_std: float = 0.1
    keyword_coverage: float = 1.0
    keywords_per_sample: tuple[int, int] = (5, 10)
    feature_scale: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.num_samples < 1:
            raise ValueError(f"num_samples must be positive, got {self.num_samples}")
        if not 1 <= self.num_diseases <= len(DISEASES):
            raise ValueError(f"num_diseases must lie in [1, {len(DISEASES)}], got {self.num_diseases}")
        if self.feature_dim < self.num_diseases:
            raise ValueError("feature_dim must be at least num_diseases")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        if not 0.0 <= self.keyword_coverage <= 1.0:
            raise ValueError("keyword_coverage must lie in [0, 1]")
        lo, hi = self.keywords_per_sample
        if not 0 <= lo <= hi:
            raise ValueError(f"bad keywords_per_sample range {self.keywords_per_sample}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["keywords_per_sample"] = list(self.keywords_per_sample)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        d = dict(d)
        d["keywords_per_sample"] = tuple(d["keywords_per_sample"])
        return cls(**d)


@dataclass
class Sample:
    id: str
    features: list[float]
    keywords: list[str]
    report: str


@dataclass
class DatasetSplit:
    train: list[Sample] = field(default_factory=list)
    val: list[Sample] = field(default_factory=list)
    test: list[Sample] = field(default_factory=list)
    manifest: dict | None = None

    def items(self):
        return (("train", self.train), ("val", self.val), ("test", self.test))

    def counts(self) -> dict[str, int]:
        return {name: len(samples) for name, samples in self.items()}

    def __eq__(self, other) -> bool:
        return isinstance(other, DatasetSplit) and list(self.items()) == list(other.items())


def split_sizes(n: int) -> tuple[int, int, int]:
    """60/20/20 floor allocation with the remainder going to train."""
    val = math.floor(0.2 * n)
    test = math.floor(0.2 * n)
    return n - val - test, val, test


def _fill(template: str, slots: dict[str, str]) -> tuple[str, list[str]]:
    report = template.format(**slots)
    const = normalize(template.format(**{k: "" for k in slots}))
    return report, const


def generate(spec: SyntheticSpec) -> DatasetSplit:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    lo, hi = spec.keywords_per_sample
    samples = []
    for i in range(spec.num_samples):
        d = int(rng.integers(spec.num_diseases))
        slots = {"disease": DISEASES[d]}
        for name, values in ATTRIBUTES.items():
            slots[name] = values[int(rng.integers(len(values)))]
        noise = rng.normal(0.0, spec.noise_std, size=spec.feature_dim) if spec.noise_std > 0 else np.zeros(spec.feature_dim)
        features = noise
        features[d] += spec.feature_scale

        report, constant = _fill(TEMPLATES[d % len(TEMPLATES)], slots)
        filling = [tok for name in SLOT_ORDER for tok in normalize(slots[name])]
        n_keep = int(round(spec.keyword_coverage * len(filling)))
        keep = np.sort(rng.choice(len(filling), size=n_keep, replace=False)) if n_keep else []
        keywords = [filling[j] for j in keep]
        target = int(rng.integers(lo, hi + 1))
        # pad with the template's constant words: present in the report, but carry no sample information
        padding = [constant[j % len(constant)] for j in range(max(0, target - len(keywords)))] if constant else []
        keywords = padding + keywords
        samples.append(Sample(f"s{i:05d}", features.tolist(), keywords, report))

    n_train, n_val, _ = split_sizes(spec.num_samples)
    return DatasetSplit(
        samples[:n_train],
        samples[n_train:n_train + n_val],
        samples[n_train + n_val:],
        manifest={"format": FORMAT, "prng": PRNG, "spec": spec.to_dict(), "counts": dict(zip(("train", "val", "test"), split_sizes(spec.num_samples)))},
    )


class DatasetFormatError(ValueError):
    def __init__(self, path, lineno: int, message: str):
        super().__init__(f"{path}:{lineno}: {message}")
        self.lineno = lineno


_FIELDS = ("id", "split", "features", "keywords", "report")


def write_dataset(split: DatasetSplit, path: str | Path) -> None:
    """JSONL: a manifest header line, then one record per sample."""
    lines = []
    manifest = dict(split.manifest or {"format": FORMAT})
    manifest["counts"] = split.counts()
    lines.append(json.dumps({"manifest": manifest}, sort_keys=True))
    for name, samples in split.items():
        for s in samples:
            rec = {"id": s.id, "split": name, "features": s.features, "keywords": s.keywords, "report": s.report}
            lines.append(json.dumps(rec))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_dataset(path: str | Path) -> DatasetSplit:
    out = DatasetSplit()
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(path, lineno, f"malformed JSON ({exc.msg})") from None
        if not isinstance(rec, dict):
            raise DatasetFormatError(path, lineno, "record is not a JSON object")
        if "manifest" in rec:
            if lineno != 1:
                raise DatasetFormatError(path, lineno, "manifest allowed only on the first line")
            out.manifest = rec["manifest"]
            continue
        missing = [f for f in _FIELDS if f not in rec]
        if missing:
            raise DatasetFormatError(path, lineno, f"missing field(s) {missing}")
        if rec["split"] not in ("train", "val", "test"):
            raise DatasetFormatError(path, lineno, f"unknown split {rec['split']!r}")
        feats = rec["features"]
        if not isinstance(feats, list) or not all(isinstance(v, (int, float)) for v in feats):
            raise DatasetFormatError(path, lineno, "features must be a list of numbers")
        if not isinstance(rec["keywords"], list) or not isinstance(rec["report"], str):
            raise DatasetFormatError(path, lineno, "keywords must be a list and report a string")
        sample = Sample(str(rec["id"]), [float(v) for v in feats], list(rec["keywords"]), rec["report"])
        getattr(out, rec["split"]).append(sample)
    return out

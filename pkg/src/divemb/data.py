"""Synthetic ambiguous cross-modal corpus plus tiny trainable encoders.

Each image is built from a handful of concept vectors; each of its
captions describes a single concept (one facet of the image).  One image
therefore matches several semantically different captions, which is the
ambiguity that set-based embeddings are meant to capture.  Raw features
go through small per-modality affine encoders that train jointly with
the set predictor.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tape as tc
from .predictor import SampleFeatures

CORPUS_MAGIC = b"DIVC"


@dataclass
class CorpusConfig:
    concepts: int = 32
    images: int = 512
    captions_per_image: int = 4
    m_max: int = 4              # concepts per image, drawn uniformly in [1, m_max]
    caption_concepts: int = 1   # concepts covered by one caption
    noise_sigma: float = 0.1
    style_sigma: float = 0.0    # per-image component shared with its captions
    n_regions: int = 16         # image local features per sample
    l_tokens: int = 4           # caption local features per sample
    d_raw: int = 32
    concept_cos_cap: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.concepts < self.m_max:
            raise ValueError("need at least m_max concepts")
        if self.caption_concepts < 1:
            raise ValueError("caption_concepts must be >= 1")


@dataclass
class ConceptBank:
    """Near-orthogonal unit vectors standing in for distinct semantics."""

    vectors: np.ndarray
    seed: int

    @classmethod
    def build(cls, n: int, d: int, cos_cap: float, seed: int,
              max_tries: int = 20000) -> "ConceptBank":
        rng = np.random.default_rng(seed)
        chosen = []
        tries = 0
        while len(chosen) < n:
            tries += 1
            if tries > max_tries:
                raise RuntimeError(
                    f"could not place {n} concepts with pairwise cosine "
                    f"below {cos_cap} in {d} dims"
                )
            v = rng.standard_normal(d)
            v /= np.linalg.norm(v)
            if all(abs(v @ u) < cos_cap for u in chosen):
                chosen.append(v)
        return cls(np.array(chosen), seed)


@dataclass
class Caption:
    caption_id: int
    concept_subset: list[int]
    local: np.ndarray        # L x D_raw
    global_feat: np.ndarray  # 1 x D_raw


@dataclass
class SynthSample:
    image_id: int
    concept_ids: list[int]
    local: np.ndarray        # N x D_raw, one assigned concept + noise per region
    global_feat: np.ndarray  # 1 x D_raw, mean of locals
    captions: list[Caption]


@dataclass
class Corpus:
    config: CorpusConfig
    concepts: ConceptBank
    samples: list[SynthSample]

    @property
    def n_captions(self) -> int:
        return sum(len(s.captions) for s in self.samples)

    def match_table(self) -> dict[int, list[int]]:
        """image_id -> caption_ids; the exact retrieval ground truth."""
        return {s.image_id: [c.caption_id for c in s.captions] for s in self.samples}


def _features_from_concepts(concept_vecs, count, sigma, rng):
    """Each row: a cyclically assigned concept vector plus Gaussian noise."""
    idx = np.arange(count) % len(concept_vecs)
    local = concept_vecs[idx] + sigma * rng.standard_normal(
        (count, concept_vecs.shape[1]))
    return local


def generate_corpus(cfg: CorpusConfig) -> Corpus:
    """Deterministic corpus for a given config (seed included)."""
    bank = ConceptBank.build(cfg.concepts, cfg.d_raw, cfg.concept_cos_cap, cfg.seed)
    rng = np.random.default_rng(cfg.seed + 1)
    samples = []
    caption_id = 0
    for image_id in range(cfg.images):
        m = int(rng.integers(1, cfg.m_max + 1))
        concept_ids = list(rng.choice(cfg.concepts, size=m, replace=False))
        cvecs = bank.vectors[concept_ids]
        # style: what makes this particular scene recognizable across its
        # captions, on top of the concepts it shares with other scenes
        style = cfg.style_sigma * rng.standard_normal((1, cfg.d_raw))
        local = style + _features_from_concepts(
            cvecs, cfg.n_regions, cfg.noise_sigma, rng)
        global_feat = local.mean(axis=0, keepdims=True)
        captions = []
        for _ in range(cfg.captions_per_image):
            sub_size = min(cfg.caption_concepts, m)
            subset = list(rng.choice(concept_ids, size=sub_size, replace=False))
            cap_local = style + _features_from_concepts(
                bank.vectors[subset], cfg.l_tokens, cfg.noise_sigma, rng)
            captions.append(Caption(
                caption_id, [int(c) for c in subset], cap_local,
                cap_local.mean(axis=0, keepdims=True)))
            caption_id += 1
        samples.append(SynthSample(
            image_id, [int(c) for c in concept_ids], local, global_feat, captions))
    return Corpus(cfg, bank, samples)


# ---------------------------------------------------------------------------
# trainable affine encoders (one per modality)
# ---------------------------------------------------------------------------

def encoder_param_shapes(d_raw: int, d: int) -> dict[str, tuple[int, int]]:
    shapes = {}
    for modality in ("vis", "txt"):
        shapes[f"{modality}_w_local"] = (d_raw, d)
        shapes[f"{modality}_b_local"] = (1, d)
        shapes[f"{modality}_w_global"] = (d_raw, d)
        shapes[f"{modality}_b_global"] = (1, d)
    return shapes


def init_encoder_params(d_raw: int, d: int,
                        rng: np.random.Generator) -> dict[str, np.ndarray]:
    params = {}
    for name, (rows, cols) in encoder_param_shapes(d_raw, d).items():
        if name.startswith(("vis_b", "txt_b")):
            params[name] = np.zeros((rows, cols))
        else:
            params[name] = rng.uniform(-1, 1, size=(rows, cols)) / np.sqrt(rows)
    return params


def encode_taped(features: SampleFeatures, enc_params: dict[str, tc.Var],
                 prefix: str) -> SampleFeatures:
    """Apply the affine encoder on a tape; returns taped SampleFeatures."""
    local = tc.add_rowvec(
        tc.matmul(tc.constant(features.local), enc_params[f"{prefix}_w_local"]),
        enc_params[f"{prefix}_b_local"])
    glob = tc.add_rowvec(
        tc.matmul(tc.constant(features.global_feat), enc_params[f"{prefix}_w_global"]),
        enc_params[f"{prefix}_b_global"])
    return _TapedFeatures(local, glob)


class _TapedFeatures:
    """SampleFeatures stand-in whose fields are taped Vars' values."""

    def __init__(self, local: tc.Var, glob: tc.Var):
        self.local_var = local
        self.global_var = glob

    @property
    def local(self):
        return self.local_var

    @property
    def global_feat(self):
        return self.global_var


def encode(features: SampleFeatures, enc_params: dict[str, np.ndarray],
           prefix: str) -> SampleFeatures:
    """Eager affine encoding, used at evaluation time."""
    local = features.local @ enc_params[f"{prefix}_w_local"] + enc_params[f"{prefix}_b_local"]
    glob = features.global_feat @ enc_params[f"{prefix}_w_global"] + enc_params[f"{prefix}_b_global"]
    return SampleFeatures(local, glob)


def image_features(sample: SynthSample) -> SampleFeatures:
    return SampleFeatures(sample.local, sample.global_feat)


def caption_features(cap: Caption) -> SampleFeatures:
    return SampleFeatures(cap.local, cap.global_feat)


# ---------------------------------------------------------------------------
# corpus file: JSON header + DIVM feature blobs, deterministic byte layout
# ---------------------------------------------------------------------------

def save_corpus(path, corpus: Corpus) -> None:
    header = {
        "config": asdict(corpus.config),
        "images": [
            {
                "image_id": s.image_id,
                "concept_ids": s.concept_ids,
                "captions": [
                    {"caption_id": c.caption_id, "concept_subset": c.concept_subset}
                    for c in s.captions
                ],
            }
            for s in corpus.samples
        ],
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CORPUS_MAGIC)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        tc.write_matrix(fh, corpus.concepts.vectors)
        for s in corpus.samples:
            tc.write_matrix(fh, s.local)
            tc.write_matrix(fh, s.global_feat)
            for c in s.captions:
                tc.write_matrix(fh, c.local)
                tc.write_matrix(fh, c.global_feat)


def load_corpus(path) -> Corpus:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CORPUS_MAGIC:
            raise ValueError(f"bad corpus magic: {magic!r}")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        cfg = CorpusConfig(**header["config"])
        bank = ConceptBank(tc.read_matrix(fh), cfg.seed)
        samples = []
        for srec in header["images"]:
            local = tc.read_matrix(fh)
            glob = tc.read_matrix(fh)
            captions = []
            for crec in srec["captions"]:
                clocal = tc.read_matrix(fh)
                cglob = tc.read_matrix(fh)
                captions.append(Caption(crec["caption_id"], crec["concept_subset"],
                                        clocal, cglob))
            samples.append(SynthSample(srec["image_id"], srec["concept_ids"],
                                       local, glob, captions))
    return Corpus(cfg, bank, samples)

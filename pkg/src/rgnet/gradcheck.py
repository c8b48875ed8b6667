"""Central finite-difference gradient checks for every trainable stage.

All checks run in float64 with step 1e-4. An element passes when
|analytic - numeric| <= atol + rtol * max(|analytic|, |numeric|) with
rtol 1e-3 (atol absorbs finite-difference noise on near-zero gradients).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import PersonBox, SEGate, Stem, gap, roi_pool
from .graph import GraphQueryModule
from .loss import build_mask, compute_class_weights, weighted_bce
from .pipeline import ModelConfig, RelationModel
from .tensor import Tensor
from .transformer import LogitCube, ReasoningModule, symmetrize_scores

EPS = 1e-4
RTOL = 1e-3
ATOL = 1e-6


@dataclass
class CheckResult:
    name: str
    seed: int
    max_err: float
    checked: int
    ok: bool


def check_param_grads(forward, params, sample_cap=None, rng=None,
                      eps=EPS, rtol=RTOL, atol=ATOL):
    """Compare backward gradients of forward() against central differences.

    forward must be a pure function of the param tensors that returns a
    scalar Tensor. Returns (max_scaled_error, elements_checked); the scaled
    error is |a - n| / (atol + rtol * max(|a|, |n|)), so <= 1 passes.
    """
    for p in params:
        p.zero_grad()
    loss = forward()
    loss.backward()
    analytic = [None if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    checked = 0
    for p, ana in zip(params, analytic):
        flat = p.data.ravel()
        if ana is None:
            ana = np.zeros_like(p.data)
        ana_flat = ana.ravel()
        idxs = np.arange(flat.size)
        if sample_cap is not None and flat.size > sample_cap:
            idxs = rng.choice(flat.size, size=sample_cap, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(forward().data)
            flat[i] = orig - eps
            fm = float(forward().data)
            flat[i] = orig
            num = (fp - fm) / (2.0 * eps)
            a = float(ana_flat[i])
            scaled = abs(a - num) / (atol + rtol * max(abs(a), abs(num)))
            worst = max(worst, scaled)
            checked += 1
    return worst, checked


def _rand(rng, shape, lo=-2.0, hi=2.0):
    return rng.uniform(lo, hi, size=shape)


def _weighted_dot(t: Tensor, rng) -> Tensor:
    return (t * Tensor(_rand(rng, t.shape, -1, 1), dtype=np.float64)).sum()


def _check_stem(seed):
    rng = np.random.default_rng(seed)
    stem = Stem(4, rng, np.float64, mid_channels=4)
    img = Tensor(_rand(rng, (3, 16, 16), 0, 1), dtype=np.float64)
    probe = np.random.default_rng(seed + 1000)
    w = Tensor(_rand(probe, (4, 2, 2), -1, 1), dtype=np.float64)
    return lambda: (stem(img) * w).sum(), stem.parameters()


def _check_se(seed):
    rng = np.random.default_rng(seed)
    se = SEGate(4, rng, np.float64, reduction=2)
    f = Tensor(_rand(rng, (4, 3, 3)), dtype=np.float64, requires_grad=True)
    probe = np.random.default_rng(seed + 1000)
    w = Tensor(_rand(probe, (4,), -1, 1), dtype=np.float64)
    return lambda: (gap(se(f)) * w).sum(), se.parameters() + [f]


def _check_roi(seed):
    rng = np.random.default_rng(seed)
    f = Tensor(_rand(rng, (3, 5, 5)), dtype=np.float64, requires_grad=True)
    box = PersonBox.from_floats(0.1, 0.15, 0.7, 0.85)
    probe = np.random.default_rng(seed + 1000)
    w = Tensor(_rand(probe, (27,), -1, 1), dtype=np.float64)
    return lambda: (roi_pool(f, box, 3) * w).sum(), [f]


def _check_gqm(seed, mode):
    rng = np.random.default_rng(seed)
    gqm = GraphQueryModule(roi_dim=5, global_dim=3, d=6, iterations=2, rng=rng, dtype=np.float64)
    x = Tensor(_rand(rng, (4, 5)), dtype=np.float64, requires_grad=True)
    g = Tensor(_rand(rng, (1, 3)), dtype=np.float64, requires_grad=True)
    probe = np.random.default_rng(seed + 1000)
    qdim = 6 if mode == "edge" else 12
    w = Tensor(_rand(probe, (16, qdim), -1, 1), dtype=np.float64)
    return lambda: (gqm(x, g, mode)[0] * w).sum(), gqm.parameters() + [x, g]


def _check_encoder(seed):
    rng = np.random.default_rng(seed)
    trm = ReasoningModule(feat_channels=3, query_dim=6, d_m=8, heads=2, ff_dim=12,
                          rng=rng, dtype=np.float64)
    f = Tensor(_rand(rng, (3, 2, 2)), dtype=np.float64, requires_grad=True)
    probe = np.random.default_rng(seed + 1000)
    w = Tensor(_rand(probe, (4, 8), -1, 1), dtype=np.float64)
    params = list(trm.in_proj.parameters()) + list(trm.encoder.parameters()) + [f]
    return lambda: (trm.encode(f) * w).sum(), params


def _check_decoder(seed):
    rng = np.random.default_rng(seed)
    trm = ReasoningModule(feat_channels=3, query_dim=6, d_m=8, heads=2, ff_dim=12,
                          rng=rng, dtype=np.float64)
    queries = Tensor(_rand(rng, (9, 6)), dtype=np.float64, requires_grad=True)
    memory = Tensor(_rand(rng, (4, 8)), dtype=np.float64, requires_grad=True)
    valid = np.array([False, True, True, True, False, True, True, True, False])
    probe = np.random.default_rng(seed + 1000)
    w = Tensor(_rand(probe, (9, 8), -1, 1), dtype=np.float64)
    params = list(trm.query_proj.parameters()) + list(trm.decoder.parameters()) + [queries, memory]
    return lambda: (trm.decode(queries, memory, valid) * w).sum(), params


def _check_loss(seed):
    rng = np.random.default_rng(seed)
    p, c = 3, 4
    raw = Tensor(_rand(rng, (p * p, c)), dtype=np.float64, requires_grad=True)
    valid = np.array([i != j for i in range(p) for j in range(p)])
    relations = [(0, 1, 2), (1, 2, 0), (0, 2, 3)]
    mask, targets = build_mask(relations, p, p, "bilateral")
    weights = compute_class_weights([3, 5, 2, 4])

    def forward():
        cube = LogitCube(scores=symmetrize_scores(raw, p), p=p, valid=valid)
        return weighted_bce(cube, targets, mask, weights)

    return forward, [raw]


def tiny_pipeline_config() -> ModelConfig:
    return ModelConfig(
        num_classes=3, feat_channels=4, stem_mid_channels=4, graph_dim=6,
        model_dim=8, roi_grid=2, max_persons=3, heads=2, ff_dim=12,
        se_reduction=2, image_size=16, dropout=0.0,
    )


def _check_pipeline(seed):
    cfg = tiny_pipeline_config()
    model = RelationModel(cfg, np.random.default_rng(seed), dtype=np.float64)
    rng = np.random.default_rng(seed + 500)
    img = rng.uniform(0, 1, size=(3, 16, 16))
    persons = [
        PersonBox.from_floats(0.05, 0.1, 0.4, 0.5),
        PersonBox.from_floats(0.5, 0.55, 0.9, 0.95),
        PersonBox.from_floats(0.15, 0.55, 0.45, 0.9),
    ]
    relations = [(0, 1, 0), (1, 2, 1), (0, 2, 2)]
    mask, targets = build_mask(relations, 3, 3, "bilateral")
    weights = compute_class_weights([4, 3, 5])

    def forward():
        cube = model.forward(img, persons, training=False)
        return weighted_bce(cube, targets, mask, weights)

    return forward, [p for _, p in model.named_parameters()]


def run_suite(seeds=range(5), pipeline_sample_cap=12) -> list[CheckResult]:
    """The full gradient suite; every result should come back ok."""
    builders = [
        ("stem", _check_stem, None),
        ("se_gate", _check_se, None),
        ("roi_pool", _check_roi, None),
        ("gqm_concat", lambda s: _check_gqm(s, "concat"), None),
        ("gqm_edge", lambda s: _check_gqm(s, "edge"), None),
        ("trm_encoder", _check_encoder, None),
        ("trm_decoder", _check_decoder, None),
        ("weighted_bce", _check_loss, None),
        ("full_pipeline", _check_pipeline, pipeline_sample_cap),
    ]
    results = []
    for name, build, cap in builders:
        for seed in seeds:
            forward, params = build(seed)
            err, checked = check_param_grads(
                forward, params, sample_cap=cap, rng=np.random.default_rng(seed + 99)
            )
            results.append(CheckResult(name, seed, err, checked, err <= 1.0))
    return results

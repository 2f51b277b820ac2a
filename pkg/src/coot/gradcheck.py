"""End-to-end gradient check of the full model and objective.

Each parameter group is perturbed while the parts of the forward pass it
cannot influence are held fixed: the other modality's branch, and for the
contextual-level parameters the branch's own segment and context encodings.
Loss terms that cannot depend on a group are dropped for it too. The analytic
gradients are unchanged by this, only the cost of each finite difference
shrinks.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from . import numcore as nc
from .data import SynthConfig, generate_synthetic, make_batch
from .losses import LossConfig, total_loss
from .model import BatchEmbeddings, BranchOutput, CootModel, ModelConfig
from .trainer import init_params

CONTEXTUAL_PREFIXES = ("local.", "global.")


@dataclass
class ToyProblem:
    model: CootModel
    batch: object
    loss_cfg: LossConfig


def toy_problem(seed: int = 0, init_std: float = 0.2, d: int = 16) -> ToyProblem:
    """Two pairs of two clips each, a width-16 model and every loss term switched on.

    Weights are drawn wider than for training so that a step of 1e-3 is small
    relative to the parameter scale.
    """
    synth = SynthConfig(n_pairs=2, clips_per_pair=(2, 2), frames_per_clip=(2, 3),
                        tokens_per_sentence=(2, 3), gap_frames=(0, 0), video_dim=6, text_dim=5,
                        latent_dim=4, n_topics=4, seed=3)
    ds = generate_synthetic(synth)
    cfg = ModelConfig(video_dim=synth.video_dim, text_dim=synth.text_dim, d=d, heads=2,
                      afa_heads=2, dropout=0.0, max_len=8, max_segments=2)
    model = CootModel(cfg).eval()
    init_params(model.params, seed, init_std)
    return ToyProblem(model, make_batch(ds, ds.ids, mode="eval"), LossConfig(cmc_weight=1.0))


def _embeddings(batch, v: BranchOutput, t: BranchOutput) -> BatchEmbeddings:
    return BatchEmbeddings(v.segments, t.segments, v.final, t.final, v.context, t.context,
                           batch.owner, batch.position, batch.video.seg_index, batch.text.seg_index)


def _detached(out: BranchOutput) -> BranchOutput:
    return BranchOutput(*(nc.Tensor(x.data) for x in (out.segments, out.context, out.final)))


def check_model_gradients(model: CootModel, batch, loss_cfg: LossConfig, h: float = 1e-3,
                          floor: float = 1e-6, dtype=np.float64) -> nc.GradCheckReport:
    """Central-difference check of every parameter scalar of ``model``."""
    model.eval()
    params = model.params
    # terms that never see the final embeddings are constant for contextual parameters
    final_only = replace(loss_cfg, align_low=False, align_global=False, cmc=False)
    saved = params.state_dict()
    try:
        for _, p in params.items():
            p.data = p.data.astype(dtype)
        with nc.no_grad():
            base = {"video": model.video(batch.video), "text": model.text(batch.text)}
        entries = []
        for side in ("video", "text"):
            branch = getattr(model, side)
            other = "text" if side == "video" else "video"
            fixed = _detached(base[other])
            side_batch = getattr(batch, side)
            own = _detached(base[side])

            def assemble(out, cfg=loss_cfg, side=side, fixed=fixed):
                v, t = (out, fixed) if side == "video" else (fixed, out)
                return total_loss(_embeddings(batch, v, t), cfg)[0]

            def full(branch=branch, side_batch=side_batch, assemble=assemble):
                return assemble(branch(side_batch))

            def contextual(branch=branch, side_batch=side_batch, own=own, assemble=assemble):
                final = branch.contextual(own.segments, side_batch.seg_index, own.context)
                return assemble(BranchOutput(own.segments, own.context, final), final_only)

            names = [n for n in params.names() if n.startswith(side + ".")]
            ctx = [n for n in names if n[len(side) + 1:].startswith(CONTEXTUAL_PREFIXES)]
            enc = [n for n in names if n not in ctx]
            store = dict(params.items())
            for group, f in ((enc, full), (ctx, contextual)):
                if group:
                    rep = nc.grad_check(f, [store[n] for n in group], h=h, dtype=dtype, floor=floor)
                    entries.extend(rep.entries)
    finally:
        params.load_state_dict(saved)
    worst = max((e.rel_err for e in entries), default=0.0)
    return nc.GradCheckReport(worst, len(entries), entries)


def run_gradcheck(seed: int = 0, init_std: float = 0.2, h: float = 1e-3, floor: float = 1e-6,
                  tol: float = 1e-3) -> dict:
    """Toy-problem gradient check summarised as a JSON-ready dict."""
    prob = toy_problem(seed, init_std)
    start = time.perf_counter()
    rep = check_model_gradients(prob.model, prob.batch, prob.loss_cfg, h=h, floor=floor)
    return {
        "max_rel_err": rep.max_rel_err,
        "n_checked": rep.n_checked,
        "n_parameters": prob.model.n_parameters(),
        "tolerance": tol,
        "passed": rep.passed(tol),
        "seconds": time.perf_counter() - start,
        "worst": worst_parameters(rep, 10),
    }


def worst_parameters(rep: nc.GradCheckReport, k: int = 10) -> list[dict]:
    """The ``k`` parameters with the largest error, each with its worst scalar."""
    per_param: dict[str, nc.GradCheckEntry] = {}
    for e in rep.entries:
        if e.name not in per_param or e.rel_err > per_param[e.name].rel_err:
            per_param[e.name] = e
    ranked = sorted(per_param.values(), key=lambda e: -e.rel_err)[:k]
    return [{"name": e.name, "index": list(e.index), "analytic": e.analytic,
             "numeric": e.numeric, "rel_err": e.rel_err} for e in ranked]

"""Acceptance checklist A1-A10.

Each criterion is a function of an :class:`AcceptanceContext` returning
``(passed, detail)``. The context owns two kinds of runs under its root:

* ``desk``: 2k scenes, pretrained captioner, 5k-step stage-1 decoder. Built
  once and reused (checkpoints are detected by step and config hash).
* ``smoke-a`` / ``smoke-b``: the smoke preset end to end, twice, for the
  reproducibility and freeze checks.

Stage-2/3 criteria train from the desk checkpoints with three trainer seeds
and compare eval scores before and after.
"""
from __future__ import annotations

import hashlib
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import pipeline
from .bench import BACKBONES, judge_caption, pairwise_win_rate, protocol1_eval, unified_scores
from .captioner import Captioner
from .config import PRESETS, RunConfig
from .decoder import FlowDecoder, SamplerConfig
from .errors import ConfigError, DependencyError
from .grpo import CaptionerGRPO, DecoderGRPO, advantages, clipped_surrogate, stage2_config, stage3_config
from .numerics import SeededRng, grad_check, load_checkpoint, no_grad, save_checkpoint
from .scene import VOCAB_SIZE, Scene, SceneObject, build_dataset, canonical_caption, parse_caption, render

SEEDS = (0, 1, 2)
WINDOW = 50


@dataclass
class CriterionResult:
    name: str
    passed: bool
    detail: str
    seconds: float

    def line(self) -> str:
        return f"{self.name} {'PASS' if self.passed else 'FAIL'} [{self.seconds:.1f}s] {self.detail}"


class AcceptanceContext:
    def __init__(self, cfg: RunConfig | None = None, root="accept-run"):
        self.cfg = cfg or RunConfig(preset="accept")
        self.root = Path(root)
        self._cache: dict = {}

    # -- shared runs -----------------------------------------------------------
    def _ensure_data(self, cfg: RunConfig, ws: pipeline.Workspace) -> None:
        summary = ws.data / "summary.json"
        if summary.exists():
            import json

            s = json.loads(summary.read_text())
            if (s.get("train"), s.get("eval"), s.get("seed"), s.get("max_objects")) == (
                    cfg["data.n"], cfg["data.n_eval"], cfg["seed"], cfg["data.max_objects"]):
                return
        pipeline.gen_data(cfg, ws, force=True)

    def _ensure(self, cfg: RunConfig, ws: pipeline.Workspace, verb: str, component: str, steps: int) -> None:
        path = ws.ckpt(component)
        if path.exists():
            try:
                man, _ = load_checkpoint(path, component=component, config_hash=cfg.compat_hash())
                if man.step == steps:
                    return
            except DependencyError:
                pass
        pipeline.STAGES[verb](cfg, ws)

    def desk(self) -> pipeline.Workspace:
        """Gen-data, captioner pretraining and the full stage-1 run (cached on disk)."""
        if "desk" not in self._cache:
            ws = pipeline.Workspace(self.root / "desk")
            t0 = time.perf_counter()
            self._ensure_data(self.cfg, ws)
            self._ensure(self.cfg, ws, "pretrain-captioner", pipeline.CAPTIONER, self.cfg["captioner.steps"])
            t1 = time.perf_counter()
            self._ensure(self.cfg, ws, "stage1", pipeline.DECODER, self.cfg["stage1.steps"])
            self._cache["desk"] = ws
            self._cache["desk_seconds"] = (t1 - t0, time.perf_counter() - t1)
        return self._cache["desk"]

    def smoke_cfg(self) -> RunConfig:
        return self.cfg.with_overrides({**PRESETS["smoke"], "log.timing": False, "stage3.captioner": "stage2"})

    def smoke(self, name: str) -> dict:
        """Full smoke pipeline from scratch in ``root/name``; returns file digests around each stage."""
        key = f"smoke:{name}"
        if key not in self._cache:
            cfg = self.smoke_cfg()
            ws = pipeline.Workspace(self.root / name)
            if ws.root.exists():
                import shutil

                shutil.rmtree(ws.root)
            pipeline.gen_data(cfg, ws)
            pipeline.pretrain_captioner(cfg, ws)
            pipeline.stage1(cfg, ws)
            dec_before = _sha(ws.ckpt(pipeline.DECODER))
            pipeline.stage2(cfg, ws)
            dec_after = _sha(ws.ckpt(pipeline.DECODER))
            caps_before = {c: _sha(ws.ckpt(c)) for c in (pipeline.CAPTIONER, pipeline.CAPTIONER_S2)}
            pipeline.stage3(cfg, ws)
            caps_after = {c: _sha(ws.ckpt(c)) for c in (pipeline.CAPTIONER, pipeline.CAPTIONER_S2)}
            self._cache[key] = {"ws": ws, "cfg": cfg, "decoder": (dec_before, dec_after),
                                "captioners": (caps_before, caps_after)}
        return self._cache[key]


def _sha(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _small_models(seed: int = 0):
    cap = Captioner(d_model=16, max_len=26, random_state=seed).initialize()
    dec = FlowDecoder(hidden_dim=16, n_hidden=2, cond_dim=8, text_dim=16, random_state=seed).initialize()
    return cap, dec


# -- criteria ---------------------------------------------------------------------

def a1_gradients(ctx: AcceptanceContext):
    t0 = time.perf_counter()
    ds = build_dataset(8, seed=3, n_eval=2)
    X, caps = ds.images(), ds.captions()
    cap, dec = _small_models()
    errs = {}
    H = SeededRng(1).normal((2, 16))
    errs["rf_loss"] = grad_check(lambda: dec.loss(X[:2], H, SeededRng(7), p_drop=0.5), dec.params_, max_per_key=12)
    errs["caption_ce"] = grad_check(lambda: cap.cross_entropy(X[:2], caps[:2]), cap.params_, max_per_key=6)

    tr2 = CaptionerGRPO(cap, dec, stage2_config(lr=1e-3, beta=0.1, sampler=SamplerConfig(steps=3, cfg_scale=2.0)),
                        random_state=2, log_timing=False).initialize()
    tr2.partial_fit(X)
    trajs, _, R = tr2.rollout(X[1], 0)
    errs["stage2_surrogate"] = grad_check(lambda: tr2.objective(X[1], trajs, R)[0], cap.params_, max_per_key=6)

    cap3, dec3 = _small_models(1)
    tr3 = DecoderGRPO(dec3, stage3_config(group_size=3, lr=1e-3, sampler=SamplerConfig(steps=4, cfg_scale=3.0,
                                                                                        mode="sde")),
                      random_state=3, log_timing=False).initialize()
    C = dec3.conditions(cap3.hidden_states(caps))
    tr3.partial_fit(X, C)
    traj, _, R3 = tr3.rollout(X[2], C[2], 0)
    errs["stage3_surrogate"] = grad_check(lambda: tr3.objective(traj, R3)[0], dec3.params_, max_per_key=6)
    secs = time.perf_counter() - t0
    worst = max(errs.values())
    detail = " ".join(f"{k}={v:.1e}" for k, v in errs.items()) + f" runtime={secs:.1f}s"
    return worst < 1e-4 and secs < 60, detail


def a2_stage1(ctx: AcceptanceContext):
    smoke = ctx.smoke("smoke-a")
    losses = [r["rf_loss"] for r in pipeline.read_metrics(smoke["ws"].metrics("stage1"))]
    k = 10
    first, last = float(np.mean(losses[:k])), float(np.mean(losses[-k:]))
    smoke_ok = last < 0.5 * first

    ws = ctx.desk()
    cfg = ctx.cfg
    ds = pipeline.load_dataset(ws.data)
    Xe = ds.images("eval")
    cap = pipeline.load_captioner(cfg, ws.ckpt(pipeline.CAPTIONER))
    trained = pipeline.load_decoder(cfg, ws.ckpt(pipeline.DECODER))
    untrained = pipeline.make_decoder(cfg).initialize()
    eval_caps = cap.predict(Xe)
    s_tr = pipeline.evaluate(cap, trained, Xe, cfg, captions=eval_caps).overall
    s_un = pipeline.evaluate(cap, untrained, Xe, cfg, captions=eval_caps).overall
    full_ok = s_tr - s_un >= 15.0
    cap_s, dec_s = ctx._cache.get("desk_seconds", (float("nan"), float("nan")))
    detail = (f"smoke rf_loss {first:.1f}->{last:.1f} ({last / first:.2f}x); full protocol1 {s_tr:.2f} vs "
              f"untrained {s_un:.2f} (+{s_tr - s_un:.2f}, need +15); train time captioner {cap_s:.0f}s "
              f"decoder {dec_s:.0f}s")
    return smoke_ok and full_ok, detail


def a3_advantages(ctx: AcceptanceContext):
    rng = SeededRng(0)
    worst_mean = worst_std = 0.0
    for _ in range(1000):
        G = int(rng.integers(2, 16))
        r = rng.normal(G) * rng.uniform() * 10 + rng.normal(1)
        a = advantages(r)
        worst_mean = max(worst_mean, abs(float(a.mean())))
        if r.std() > 1e-8:
            worst_std = max(worst_std, abs(float(a.std()) - 1))
    ex = advantages([1.0, 2.0, 3.0])
    expected = np.array([-1.0, 0.0, 1.0]) / np.sqrt(2.0 / 3.0)
    ex_ok = np.allclose(np.round(ex, 4), np.round(expected, 4), atol=0) and abs(round(ex[2], 4) - 1.2247) < 1e-12
    ok = worst_mean < 1e-6 and worst_std < 1e-6 and ex_ok
    return ok, f"max|mean|={worst_mean:.1e} max|std-1|={worst_std:.1e} [1,2,3]->{np.round(ex, 4).tolist()}"


def a4_clipping(ctx: AcceptanceContext):
    eps, h = 0.2, 1e-7
    cases = [(1.5, 1.0, 0.0), (1.25, 2.0, 0.0), (0.5, -1.0, 0.0), (0.7, -0.3, 0.0),
             (1.1, 1.0, 1.0), (0.9, 1.0, 1.0), (1.1, -2.0, -2.0), (0.9, -2.0, -2.0),
             (0.5, 1.0, 1.0), (1.5, -1.0, -1.0)]
    worst = 0.0
    for r, A, want in cases:
        fd = (clipped_surrogate(r + h, A, eps) - clipped_surrogate(r - h, A, eps)) / (2 * h)
        worst = max(worst, abs(fd - want))
    return worst < 1e-6, f"{len(cases)} regimes, max |fd - expected| = {worst:.1e}"


def a5_sde_ode(ctx: AcceptanceContext):
    cfg = ctx.cfg
    dec = pipeline.make_decoder(cfg).initialize()
    c = SeededRng(11).normal((3, dec.cond_dim))
    base = SamplerConfig(steps=cfg["stage3.rollout_steps"], cfg_scale=cfg["sampler.cfg_scale"], seed=5)
    ode = dec.ode_sample(c, base, trajectory=True)
    sde0 = dec.sde_sample(c, SamplerConfig(steps=base.steps, cfg_scale=base.cfg_scale, noise_level=0.0, seed=5))
    bit_ok = ode.states.tobytes() == sde0.states.tobytes()

    scfg = SamplerConfig(steps=base.steps, cfg_scale=base.cfg_scale, mode="sde",
                         noise_level=cfg["stage3.noise_level"], seed=5)
    tr = dec.sde_sample(c, scfg)
    with no_grad():
        lp = dec.trajectory_logprob(tr).data
        lp2 = dec.trajectory_logprob(tr).data
    worst = 0.0
    for k in range(tr.n_stochastic):
        x = tr.states[k + 1].astype(np.float64)
        mu = tr.means[k].astype(np.float64)
        var = float(tr.variances[k])
        oracle = -0.5 * np.sum((x - mu) ** 2, axis=1) / var - 0.5 * x.shape[1] * np.log(2 * np.pi * var)
        worst = max(worst, float(np.max(np.abs(lp[:, k] - oracle) / np.maximum(1.0, np.abs(oracle)))))
    ratio_dev = float(np.max(np.abs(np.exp(lp2 - lp) - 1)))
    ok = bit_ok and worst < 1e-6 and ratio_dev <= 1e-5
    return ok, f"a=0 chain bit-identical={bit_ok}; density rel err {worst:.1e}; self-ratio dev {ratio_dev:.1e}"


def _stage_runs(ctx: AcceptanceContext, stage: int, steps: int):
    """Run a GRPO stage from the desk checkpoints for every seed; returns summaries and metrics."""
    ws = ctx.desk()
    out = []
    for seed in SEEDS:
        cfg = ctx.cfg.with_overrides({f"stage{stage}.seed": seed, f"stage{stage}.steps": steps,
                                      "stage3.captioner": "pretrained"})
        suffix = f"-seed{seed}"
        fn = pipeline.stage2 if stage == 2 else pipeline.stage3
        summary = fn(cfg, ws, suffix=suffix)
        records = pipeline.read_metrics(ws.metrics(f"stage{stage}{suffix}"))
        out.append((summary, records))
    return out


def a6_stage2(ctx: AcceptanceContext):
    runs = _stage_runs(ctx, 2, ctx.cfg["stage2.steps"])
    gains, len_deltas, parts = [], [], []
    for seed, (s, recs) in zip(SEEDS, runs):
        lens = [r["mean_caption_len"] for r in recs if "mean_caption_len" in r]
        d_len = float(np.mean(lens[-WINDOW:]) - np.mean(lens[:WINDOW]))
        gains.append(s["eval_final"] - s["eval_initial"])
        len_deltas.append(d_len)
        parts.append(f"seed{seed}: {s['eval_initial']:.2f}->{s['eval_final']:.2f} len {d_len:+.2f}")
    g, dl = float(np.median(gains)), float(np.median(len_deltas))
    ok = g >= 2.0 and dl >= 0.0
    return ok, f"median gain {g:+.2f} (need +2), median caption-length change {dl:+.2f}; " + "; ".join(parts)


def a7_stage3(ctx: AcceptanceContext):
    runs = _stage_runs(ctx, 3, ctx.cfg["stage3.steps"])
    gains, kls, parts = [], [], []
    for seed, (s, recs) in zip(SEEDS, runs):
        kl = [r["kl"] for r in recs if "kl" in r]
        kls.extend(kl)
        gains.append(s["eval_final"] - s["eval_initial"])
        parts.append(f"seed{seed}: {s['eval_initial']:.2f}->{s['eval_final']:.2f} max kl {max(kl):.2e}")
    g = float(np.median(gains))
    kl_ok = bool(np.all(np.isfinite(kls))) and max(kls) < 1.0
    return g >= 1.0 and kl_ok, f"median gain {g:+.2f} (need +1), kl finite and < 1: {kl_ok}; " + "; ".join(parts)


def a8_scores(ctx: AcceptanceContext):
    cfg = ctx.cfg
    ds = build_dataset(1, seed=cfg["seed"], max_objects=cfg["data.max_objects"], n_eval=cfg["data.n_eval"])
    X, scenes = ds.images("eval"), ds.scenes("eval")
    per = unified_scores(X, X)
    self_dev = max(float(np.max(np.abs(v - 100.0))) for v in per.values())
    Y = np.roll(X, 1, axis=0)
    ab, ba = unified_scores(X, Y), unified_scores(Y, X)
    sym_dev = max(float(np.max(np.abs(ab[k] - ba[k]))) for k in BACKBONES)
    rep = protocol1_eval(lambda ims: [canonical_caption(s) for s in scenes], pipeline.oracle_reconstruct, X, scenes)
    ok = self_dev <= 1e-6 and sym_dev <= 1e-9 and abs(rep.overall - 100.0) <= 1e-6
    return ok, (f"self-score dev {self_dev:.1e} over {len(X)} scenes x {len(BACKBONES)} backbones; "
                f"symmetry dev {sym_dev:.1e}; oracle protocol1 overall {rep.overall:.6f}")


def a9_judge(ctx: AcceptanceContext):
    cfg = ctx.cfg
    ds = build_dataset(1, seed=cfg["seed"], max_objects=cfg["data.max_objects"], n_eval=cfg["data.n_eval"])
    scenes = ds.scenes("eval")
    canon = [canonical_caption(s) for s in scenes]
    f1_ok = all(judge_caption(c, s).f1 == 1.0 for c, s in zip(canon, scenes))
    singles = [s for s in scenes if len(s) == 1]
    rng = SeededRng(cfg["seed"], (0xA9,))
    while len(singles) < 10:
        singles.append(Scene((SceneObject((int(rng.integers(0, 4)), int(rng.integers(0, 4))), "cross", "cyan",
                                          "large"),)))
    n_checked, increased = 0, 0
    for s in singles:
        cap = canonical_caption(s)
        base = judge_caption(cap, s).f1
        for i in range(len(cap)):
            for v in range(VOCAB_SIZE):
                bad = list(cap)
                bad[i] = v
                n_checked += 1
                increased += judge_caption(bad, s).f1 > base
    wr = pairwise_win_rate(canon, canon, scenes)
    ok = f1_ok and increased == 0 and wr == 50.0
    return ok, (f"canonical F1=1 on {len(scenes)} scenes: {f1_ok}; {n_checked} corruptions of {len(singles)} "
                f"one-object captions, {increased} increased F1; self win rate {wr}")


def a10_reproducibility(ctx: AcceptanceContext):
    a, b = ctx.smoke("smoke-a"), ctx.smoke("smoke-b")
    wa, wb = a["ws"], b["ws"]
    files = sorted(p.relative_to(wa.root) for d in ("metrics", "ckpt") for p in (wa.root / d).glob("*")
                   if not p.name.endswith(".timing.jsonl"))
    diff = [str(f) for f in files if not (wb.root / f).exists() or _sha(wa.root / f) != _sha(wb.root / f)]
    dec_ok = a["decoder"][0] == a["decoder"][1]
    cap_ok = a["captioners"][0] == a["captioners"][1]
    path = wa.ckpt(pipeline.DECODER_S3)
    man, tensors = load_checkpoint(path)
    again = wa.root / "resave.ckpt"
    save_checkpoint(again, tensors, man.component, man.step, man.config_hash, man.meta)
    round_ok = again.read_bytes() == path.read_bytes()
    again.unlink()
    ok = not diff and dec_ok and cap_ok and round_ok
    return ok, (f"{len(files)} metrics/checkpoint files compared, differing: {diff or 'none'}; stage-2 decoder "
                f"unchanged {dec_ok}; stage-3 captioners unchanged {cap_ok}; save/load/save identical {round_ok}")


CRITERIA: dict[str, Callable[[AcceptanceContext], tuple[bool, str]]] = {
    "A1": a1_gradients, "A2": a2_stage1, "A3": a3_advantages, "A4": a4_clipping, "A5": a5_sde_ode,
    "A6": a6_stage2, "A7": a7_stage3, "A8": a8_scores, "A9": a9_judge, "A10": a10_reproducibility,
}


def run_criterion(ctx: AcceptanceContext, name: str) -> CriterionResult:
    t0 = time.perf_counter()
    try:
        passed, detail = CRITERIA[name](ctx)
    except Exception as e:  # a crash is a failure of that criterion, not of the suite
        passed, detail = False, f"error: {type(e).__name__}: {e}"
    return CriterionResult(name, bool(passed), detail, time.perf_counter() - t0)


def run_acceptance(cfg: RunConfig | None = None, root="accept-run", names=None, stream=sys.stdout):
    ctx = AcceptanceContext(cfg, root)
    results = []
    for name in names or CRITERIA:
        if name not in CRITERIA:
            raise ConfigError(f"unknown criterion {name}; choose from {sorted(CRITERIA)}")
        res = run_criterion(ctx, name)
        results.append(res)
        if stream is not None:
            print(res.line(), file=stream, flush=True)
    return results

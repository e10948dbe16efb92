"""Stage runners behind the CLI verbs.

A run lives in one work directory::

    data/       train.jsonl, eval.jsonl, images/, summary.json
    ckpt/       captioner, decoder, captioner-stage2, decoder-stage3 (.ckpt)
    metrics/    <stage>.jsonl (deterministic) and <stage>.timing.jsonl
    reports/    summaries and eval tables

Every stage is a deterministic function of the config and the files it
reads, so two runs with the same config write byte-identical metrics and
checkpoints. Wall-clock timings go to a separate file for that reason.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .bench import BACKBONES, judge_caption, pairwise_win_rate, protocol1_eval, unified_score
from .captioner import Captioner
from .config import RunConfig
from .decoder import FlowDecoder, SamplerConfig
from .errors import DependencyError, InputError, NumericError, UniReconError
from .grpo import CaptionerGRPO, DecoderGRPO, GrpoConfig
from .numerics import SeededRng, load_checkpoint, save_checkpoint
from .scene import (
    Scene,
    build_dataset,
    canonical_caption,
    decode_tokens,
    export_dataset,
    load_dataset,
    parse_caption,
    read_ppm,
    render,
    write_ppm,
)

CAPTIONER, DECODER = "captioner", "decoder"
CAPTIONER_S2, DECODER_S3 = "captioner-stage2", "decoder-stage3"
EVAL_NOISE_TAG = 0xE7
HIDDEN_CHUNK = 200


@dataclass
class Workspace:
    root: Path

    def __post_init__(self):
        self.root = Path(self.root)

    @classmethod
    def from_config(cls, cfg: RunConfig, override=None) -> "Workspace":
        return cls(Path(override or cfg["paths.workdir"]))

    @property
    def data(self) -> Path:
        return self.root / "data"

    def ckpt(self, component: str) -> Path:
        return self.root / "ckpt" / f"{component}.ckpt"

    def metrics(self, stage: str) -> Path:
        return self.root / "metrics" / f"{stage}.jsonl"

    def report(self, name: str) -> Path:
        return self.root / "reports" / name


# -- metrics -------------------------------------------------------------------

class MetricsLog:
    """Append-only line-delimited records with strictly increasing steps.

    Opening with ``resume_step=k`` keeps records up to step ``k`` and drops
    the rest, so a resumed run continues at ``k + 1`` without gaps or
    duplicates. Without resume the file starts empty.
    """

    def __init__(self, path, stage: str, resume_step: int | None = None, timing: bool = True):
        self.path = Path(path)
        self.timing_path = self.path.with_name(self.path.stem + ".timing.jsonl")
        self.stage = stage
        self.timing = timing
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.records = []
        if resume_step is not None and self.path.exists():
            self.records = [r for r in read_metrics(self.path) if r["step"] <= resume_step]
        self._rewrite(self.path, self.records)
        timing_keep = []
        if resume_step is not None and self.timing_path.exists():
            timing_keep = [r for r in read_metrics(self.timing_path) if r["step"] <= resume_step]
        if timing:
            self._rewrite(self.timing_path, timing_keep)
        self.last_step = self.records[-1]["step"] if self.records else -1

    @staticmethod
    def _rewrite(path: Path, records) -> None:
        path.write_text("".join(_dumps(r) + "\n" for r in records))

    def append(self, step: int, metrics: dict) -> dict:
        if step <= self.last_step:
            raise InputError(f"metrics step {step} does not follow {self.last_step}")
        metrics = dict(metrics)
        wall = metrics.pop("wall_ms", None)
        rec = {"stage": self.stage, "step": int(step), **{k: v for k, v in metrics.items() if k not in ("stage", "step")}}
        with self.path.open("a") as f:
            f.write(_dumps(rec) + "\n")
        if self.timing and wall is not None:
            with self.timing_path.open("a") as f:
                f.write(_dumps({"stage": self.stage, "step": int(step), "wall_ms": wall}) + "\n")
        self.records.append(rec)
        self.last_step = step
        return rec


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def read_metrics(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


# -- model construction --------------------------------------------------------

def make_captioner(cfg: RunConfig) -> Captioner:
    return Captioner(d_model=cfg["captioner.d_model"], n_layers=cfg["captioner.n_layers"],
                     max_len=cfg["captioner.max_len"], lr=cfg["captioner.lr"], batch_size=cfg["captioner.batch"],
                     text_only_fraction=cfg["captioner.text_only_fraction"],
                     summary_weight=cfg["captioner.summary_weight"], random_state=cfg["seed"])


def make_decoder(cfg: RunConfig) -> FlowDecoder:
    return FlowDecoder(hidden_dim=cfg["decoder.hidden"], n_hidden=cfg["decoder.n_hidden"],
                       cond_dim=cfg["decoder.cond_dim"], text_dim=cfg["captioner.d_model"],
                       p_drop=cfg["stage1.p_drop"], lr=cfg["stage1.lr"], batch_size=cfg["stage1.batch"],
                       output=cfg["decoder.output"], input_scale=cfg["decoder.input_scale"],
                       cond_skip=cfg["decoder.cond_skip"], t_power=cfg["decoder.t_power"], random_state=cfg["seed"])


def grpo_config(cfg: RunConfig, stage: int) -> GrpoConfig:
    p = f"stage{stage}."
    common = dict(group_size=cfg[p + "group_size"], clip_eps=cfg[p + "clip_eps"], beta=cfg[p + "beta"],
                  lr=cfg[p + "lr"], groups_per_update=cfg[p + "groups_per_update"],
                  refresh_every=cfg[p + "refresh_every"], reward_backbone=cfg[p + "reward_backbone"])
    if stage == 2:
        sampler = SamplerConfig(steps=cfg["stage2.reward_steps"], cfg_scale=cfg["sampler.cfg_scale"], mode="ode",
                                seed=cfg["sampler.seed"])
        return GrpoConfig(temperature=cfg["stage2.temperature"], max_len=cfg["captioner.max_len"],
                          sampler=sampler, **common)
    sampler = SamplerConfig(steps=cfg["stage3.rollout_steps"], cfg_scale=cfg["sampler.cfg_scale"], mode="sde",
                            noise_level=cfg["stage3.noise_level"], seed=cfg["sampler.seed"])
    return GrpoConfig(sampler=sampler, **common)


def _restore_params(model, tensors: dict) -> None:
    model.params_.restore({k: tensors[f"param.{k}"] for k in model.params_.keys()})
    model.params_.step = int(np.asarray(tensors.get("store.step", 0)).reshape(-1)[0])


def load_captioner(cfg: RunConfig, path) -> Captioner:
    _, tensors = load_checkpoint(path, config_hash=cfg.compat_hash())
    cap = make_captioner(cfg).initialize()
    _restore_params(cap, tensors)
    return cap


def load_decoder(cfg: RunConfig, path) -> FlowDecoder:
    _, tensors = load_checkpoint(path, config_hash=cfg.compat_hash())
    dec = make_decoder(cfg).initialize()
    _restore_params(dec, tensors)
    return dec


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise DependencyError(f"{what} not found at {path}")
    return path


def latest(ws: Workspace, *components: str) -> Path:
    """First existing checkpoint among ``components`` (most trained first)."""
    for c in components:
        if ws.ckpt(c).exists():
            return ws.ckpt(c)
    raise DependencyError(f"no checkpoint for {' or '.join(components)} in {ws.root / 'ckpt'}")


# -- shared helpers ----------------------------------------------------------------

def hidden_states(cap: Captioner, captions: Sequence[Sequence[int]]) -> np.ndarray:
    return np.concatenate([cap.hidden_states(captions[i:i + HIDDEN_CHUNK])
                           for i in range(0, len(captions), HIDDEN_CHUNK)])


def eval_noise(n: int, dim: int, seed: int) -> np.ndarray:
    """Fixed per-index initial noise, so eval scores compare models and not sampler luck."""
    return np.stack([SeededRng(seed, (EVAL_NOISE_TAG, i)).normal(dim) for i in range(n)])


def decode_captions(cap: Captioner, dec: FlowDecoder, captions, steps: int, cfg_scale: float, seed: int) -> np.ndarray:
    cond = dec.conditions(hidden_states(cap, captions))
    noise = eval_noise(len(captions), dec.latent_dim, seed)
    return dec.ode_sample(cond, SamplerConfig(steps=steps, cfg_scale=cfg_scale, seed=seed), noise=noise)


def oracle_reconstruct(captions) -> np.ndarray:
    """Perfect decoder stub: parse the caption back to a scene and render it."""
    return np.stack([render(parse_caption(c).scene) for c in captions])


def evaluate(cap: Captioner, dec: FlowDecoder, images, cfg: RunConfig, steps: int | None = None,
             backbones=None, captions=None, scenes=None):
    """Protocol-1 on ``images`` with greedy captions (or fixed ``captions``)."""
    steps = steps or cfg["sampler.eval_steps"]
    caption_fn = (lambda ims: cap.predict(ims)) if captions is None else (lambda ims: captions)
    recon_fn = lambda cs: decode_captions(cap, dec, cs, steps, cfg["sampler.cfg_scale"], cfg["sampler.seed"])
    return protocol1_eval(caption_fn, recon_fn, images, scenes=scenes, backbones=backbones)


def _backbones(name: str):
    return None if name == "overall" else [name]


def _file_digest(path: Path) -> str:
    import hashlib

    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


# -- verbs -----------------------------------------------------------------------

def gen_data(cfg: RunConfig, ws: Workspace, force: bool = False) -> dict:
    ds = build_dataset(cfg["data.n"], seed=cfg["seed"], max_objects=cfg["data.max_objects"], n_eval=cfg["data.n_eval"])
    try:
        return export_dataset(ds, ws.data, force=force)
    except FileExistsError as e:
        raise InputError(str(e)) from None


def _dataset(ws: Workspace):
    return load_dataset(ws.data)


class _StageRun:
    """Step loop shared by every stage: metrics, periodic eval, checkpoints, abort handling."""

    def __init__(self, name: str, cfg: RunConfig, ws: Workspace, component: str, resume_step: int | None):
        self.name, self.cfg, self.ws, self.component = name, cfg, ws, component
        self.log = MetricsLog(ws.metrics(name), name, resume_step, timing=cfg["log.timing"])
        self.evals = [(r["step"], r["eval_overall"]) for r in self.log.records if "eval_overall" in r]

    def loop(self, start: int, total: int, step_fn: Callable[[], dict], eval_fn: Callable[[], float] | None,
             state_fn: Callable[[], dict], meta: dict | None = None) -> dict:
        every_eval, every_ckpt = self.cfg["eval.every"], self.cfg["checkpoint.every"]
        for step in range(start + 1, total + 1):
            t0 = time.perf_counter()
            try:
                metrics = step_fn()
            except NumericError as e:
                raise NumericError(f"{self.name} aborted at step {step}: {e}; last good checkpoint kept") from e
            metrics.setdefault("wall_ms", round((time.perf_counter() - t0) * 1000.0, 3))
            if eval_fn is not None and (step == total or (every_eval and step % every_eval == 0)):
                metrics["eval_overall"] = eval_fn()
                self.evals.append((step, metrics["eval_overall"]))
            self.log.append(step, metrics)
            if step == total or (every_ckpt and step % every_ckpt == 0):
                self.save(step, state_fn(), meta)
        return self.summary(total)

    def save(self, step: int, tensors: dict, meta: dict | None = None) -> Path:
        return save_checkpoint(self.ws.ckpt(self.component), tensors, self.component, step, self.cfg.compat_hash(),
                               {"stage": self.name, **(meta or {})})

    def summary(self, total: int) -> dict:
        out = {"stage": self.name, "steps": total, "checkpoint": str(self.ws.ckpt(self.component))}
        if self.log.records:
            out["final"] = self.log.records[-1]
        if self.evals:
            best = max(self.evals, key=lambda e: e[1])
            out.update(eval_initial=self.evals[0][1], eval_final=self.evals[-1][1], best_eval=best[1],
                       best_eval_step=best[0])
        _write_json(self.ws.report(f"{self.name}.summary.json"), out)
        return out


def _resume_state(cfg: RunConfig, ws: Workspace, component: str, resume) -> tuple[int | None, dict | None]:
    if not resume:
        return None, None
    path = ws.ckpt(component) if resume is True else Path(resume)
    man, tensors = load_checkpoint(_require(path, "resume checkpoint"), component=component,
                                   config_hash=cfg.compat_hash())
    return man.step, tensors


def pretrain_captioner(cfg: RunConfig, ws: Workspace, resume=False) -> dict:
    ds = _dataset(ws)
    X, caps = ds.images("train"), ds.captions("train")
    Xe, scenes_e = ds.images("eval"), ds.scenes("eval")
    cap = make_captioner(cfg).initialize()
    start, tensors = _resume_state(cfg, ws, CAPTIONER, resume)
    if tensors is not None:
        cap.load_state_arrays(tensors)
    run = _StageRun("pretrain-captioner", cfg, ws, CAPTIONER, start)

    def eval_fn():
        return float(np.mean([judge_caption(c, s).f1 for c, s in zip(cap.predict(Xe), scenes_e)]))

    out = run.loop(start or 0, cfg["captioner.steps"], lambda: {"loss": cap.partial_fit_batch(X, caps)},
                   eval_fn, cap.state_arrays)
    out["eval_metric"] = "caption_f1"
    return out


def stage1(cfg: RunConfig, ws: Workspace, resume=False) -> dict:
    ds = _dataset(ws)
    cap = load_captioner(cfg, _require(ws.ckpt(CAPTIONER), "pretrained captioner (run pretrain-captioner)"))
    X = ds.images("train")
    H = hidden_states(cap, ds.captions("train"))
    dec = make_decoder(cfg).initialize()
    start, tensors = _resume_state(cfg, ws, DECODER, resume)
    if tensors is not None:
        dec.load_state_arrays(tensors)
    run = _StageRun("stage1", cfg, ws, DECODER, start)
    Xe = ds.images("eval")
    return run.loop(start or 0, cfg["stage1.steps"], lambda: {"rf_loss": dec.partial_fit_batch(X, H)},
                    lambda: evaluate(cap, dec, Xe, cfg).overall, dec.state_arrays)


def stage2(cfg: RunConfig, ws: Workspace, resume=False, suffix: str = "") -> dict:
    """Captioner GRPO against the frozen stage-1 decoder."""
    ds = _dataset(ws)
    cap = load_captioner(cfg, _require(ws.ckpt(CAPTIONER), "pretrained captioner (run pretrain-captioner)"))
    dec_path = _require(ws.ckpt(DECODER), "stage-1 decoder (run stage1)")
    dec = load_decoder(cfg, dec_path)
    dec_digest, dec_file = dec.params_.digest(), _file_digest(dec_path)
    trainer = CaptionerGRPO(cap, dec, grpo_config(cfg, 2), random_state=cfg["stage2.seed"],
                            log_timing=cfg["log.timing"]).initialize()
    start, tensors = _resume_state(cfg, ws, CAPTIONER_S2 + suffix, resume)
    if tensors is not None:
        trainer.load_state_arrays(tensors)
    run = _StageRun("stage2" + suffix, cfg, ws, CAPTIONER_S2 + suffix, start)
    X, Xe = ds.images("train"), ds.images("eval")
    bb = _backbones(cfg["stage2.reward_backbone"])
    eval_fn = lambda: evaluate(cap, dec, Xe, cfg, backbones=bb).overall
    if start is None:
        base = eval_fn()
        run.log.append(0, {"eval_overall": base})
        run.evals.append((0, base))
    out = run.loop(start or 0, cfg["stage2.steps"], lambda: trainer.partial_fit(X), eval_fn, trainer.state_arrays)
    if dec.params_.digest() != dec_digest or _file_digest(dec_path) != dec_file:
        raise UniReconError("stage-2 modified the frozen decoder")
    out["decoder_digest"] = dec_digest
    _write_json(ws.report(f"stage2{suffix}.summary.json"), out)
    return out


def frozen_captions(cfg: RunConfig, ws: Workspace, cap: Captioner, images) -> list[list[int]]:
    return cap.predict(images)


def stage3(cfg: RunConfig, ws: Workspace, resume=False, suffix: str = "") -> dict:
    """Decoder GRPO over SDE rollouts with fixed captions from the chosen captioner."""
    ds = _dataset(ws)
    cap_name = CAPTIONER_S2 if cfg["stage3.captioner"] == "stage2" else CAPTIONER
    cap = load_captioner(cfg, _require(ws.ckpt(cap_name), f"{cap_name} checkpoint"))
    dec = load_decoder(cfg, _require(ws.ckpt(DECODER), "stage-1 decoder (run stage1)"))
    cap_digest = cap.params_.digest()
    X, Xe = ds.images("train"), ds.images("eval")
    C = dec.conditions(hidden_states(cap, frozen_captions(cfg, ws, cap, X)))
    eval_caps = cap.predict(Xe)
    trainer = DecoderGRPO(dec, grpo_config(cfg, 3), random_state=cfg["stage3.seed"],
                          log_timing=cfg["log.timing"]).initialize()
    start, tensors = _resume_state(cfg, ws, DECODER_S3 + suffix, resume)
    if tensors is not None:
        trainer.load_state_arrays(tensors)
    run = _StageRun("stage3" + suffix, cfg, ws, DECODER_S3 + suffix, start)
    bb = _backbones(cfg["stage3.reward_backbone"])
    eval_fn = lambda: evaluate(cap, dec, Xe, cfg, steps=cfg["stage3.validation_steps"], backbones=bb,
                               captions=eval_caps).overall
    if start is None:
        base = eval_fn()
        run.log.append(0, {"eval_overall": base})
        run.evals.append((0, base))
    out = run.loop(start or 0, cfg["stage3.steps"], lambda: trainer.partial_fit(X, C), eval_fn,
                   trainer.state_arrays, {"captioner": cap_name})
    if cap.params_.digest() != cap_digest:
        raise UniReconError("stage-3 modified the frozen captioner")
    out["captioner_digest"] = cap_digest
    _write_json(ws.report(f"stage3{suffix}.summary.json"), out)
    return out


STAGES = {"pretrain-captioner": pretrain_captioner, "stage1": stage1, "stage2": stage2, "stage3": stage3}


# -- reconstruct and eval ------------------------------------------------------------

def read_input(path) -> tuple[np.ndarray, Scene | None]:
    """A PPM image, or a JSON scene spec (a list of objects or ``{"scene": [...]}``)."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"input file not found: {path}")
    if path.suffix.lower() == ".json":
        try:
            raw = json.loads(path.read_text())
            scene = Scene.from_list(raw["scene"] if isinstance(raw, dict) else raw)
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise InputError(f"{path}: malformed scene spec ({e})") from None
        return render(scene), scene
    try:
        img = read_ppm(path)
    except (ValueError, IndexError) as e:
        raise InputError(f"{path}: malformed PPM ({e})") from None
    if img.shape != (32, 32, 3):
        raise InputError(f"{path}: expected a 32x32 RGB image, got {img.shape}")
    return img, None


def reconstruct(cfg: RunConfig, ws: Workspace, input_path, out_dir, oracle: bool = False,
                captioner_path=None, decoder_path=None) -> dict:
    """Image -> greedy caption -> deterministic ODE sample, plus its unified score."""
    image, scene = read_input(input_path)
    if oracle and scene is not None:
        caption = canonical_caption(scene)
        cap = None
    else:
        cap = load_captioner(cfg, captioner_path or latest(ws, CAPTIONER_S2, CAPTIONER))
        caption = cap.predict(image[None])[0]
    if oracle:
        recon = oracle_reconstruct([caption])[0]
    else:
        dec = load_decoder(cfg, decoder_path or latest(ws, DECODER_S3, DECODER))
        recon = decode_captions(cap, dec, [caption], cfg["sampler.eval_steps"], cfg["sampler.cfg_scale"],
                                cfg["sampler.seed"])[0]
    report = unified_score(image, recon)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    text = " ".join(decode_tokens(caption))
    (out / "caption.txt").write_text(text + "\n")
    write_ppm(out / "recon.ppm", recon)
    record = {"caption": text, "tokens": [int(t) for t in caption], **report.as_dict()}
    _write_json(out / "score.json", record)
    return record


def eval_protocol1(cfg: RunConfig, ws: Workspace, oracle: bool = False, captioner_path=None,
                   decoder_path=None) -> dict:
    ds = _dataset(ws)
    Xe, scenes = ds.images("eval"), ds.scenes("eval")
    if oracle:
        rep = protocol1_eval(lambda ims: [canonical_caption(s) for s in scenes], oracle_reconstruct, Xe, scenes)
    else:
        cap = load_captioner(cfg, captioner_path or latest(ws, CAPTIONER_S2, CAPTIONER))
        dec = load_decoder(cfg, decoder_path or latest(ws, DECODER_S3, DECODER))
        rep = evaluate(cap, dec, Xe, cfg, scenes=scenes)
    ws.report("protocol1.txt").parent.mkdir(parents=True, exist_ok=True)
    ws.report("protocol1.txt").write_text(rep.table() + "\n")
    _write_json(ws.report("protocol1.json"), {"scores": rep.scores, "per_scene": rep.per_scene})
    ws.report("protocol1.scenes.jsonl").write_text(
        "".join(json.dumps(r, sort_keys=True, default=float) + "\n" for r in rep.per_scene))
    return rep.scores


def eval_protocol2(cfg: RunConfig, ws: Workspace, captioner_path=None, baseline_path=None) -> dict:
    """Caption F1 against the true scenes, plus win rate over a baseline captioner."""
    ds = _dataset(ws)
    Xe, scenes = ds.images("eval"), ds.scenes("eval")
    model_path = captioner_path or latest(ws, CAPTIONER_S2, CAPTIONER)
    base_path = baseline_path or _require(ws.ckpt(CAPTIONER), "baseline captioner")
    caps = load_captioner(cfg, model_path).predict(Xe)
    base = caps if Path(base_path) == Path(model_path) else load_captioner(cfg, base_path).predict(Xe)
    reps = [judge_caption(c, s) for c, s in zip(caps, scenes)]
    result = {
        "model": str(model_path), "baseline": str(base_path),
        "precision": float(np.mean([r.precision for r in reps])),
        "recall": float(np.mean([r.recall for r in reps])),
        "f1": float(np.mean([r.f1 for r in reps])),
        "mean_caption_len": float(np.mean([len(c) for c in caps])),
        "win_rate": pairwise_win_rate(caps, base, scenes),
    }
    lines = [f"{k:>16}  {v:.4f}" if isinstance(v, float) else f"{k:>16}  {v}" for k, v in result.items()]
    ws.report("protocol2.txt").parent.mkdir(parents=True, exist_ok=True)
    ws.report("protocol2.txt").write_text("\n".join(lines) + "\n")
    _write_json(ws.report("protocol2.json"), result)
    return result


def run_all(cfg: RunConfig, ws: Workspace, through: str = "stage3", force: bool = False) -> dict:
    """Convenience: gen-data then every stage up to ``through``."""
    order = list(STAGES)
    out = {"gen-data": gen_data(cfg, ws, force=force)}
    for name in order[: order.index(through) + 1]:
        out[name] = STAGES[name](cfg, ws)
    return out


__all__ = [
    "BACKBONES", "MetricsLog", "Workspace", "decode_captions", "eval_protocol1", "eval_protocol2", "evaluate",
    "gen_data", "grpo_config", "hidden_states", "load_captioner", "load_decoder", "make_captioner",
    "make_decoder", "oracle_reconstruct", "pretrain_captioner", "read_input", "read_metrics", "reconstruct",
    "run_all", "stage1", "stage2", "stage3",
]

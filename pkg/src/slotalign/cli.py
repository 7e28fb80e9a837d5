"""Command-line surface: corpus generation, training, alignment, evaluation,
and the end-to-end comparative benchmark.

Run configs are flat key=value text files; unknown keys are rejected. Exit
codes: 2 missing file, 3 parse failure, 4 config/request validation failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import aligner, ctc, metrics
from .corpus import CorpusConfig, Utterance, gen_utterance, mix_long_form, \
    prototype_vectors, read_manifest, write_manifest, ManifestError
from .slotting import SlotRequestError, build_inference_sequence
from .timegrid import GridError

EXIT_MISSING_FILE = 2
EXIT_PARSE = 3
EXIT_CONFIG = 4


class ConfigError(ValueError):
    pass


# every accepted key with (type, default); the resolved config is written next
# to each run's outputs
_CONFIG_KEYS = {
    # corpus
    "vocab_size": (int, 32),
    "feat_dim": (int, 32),
    "noise_sigma": (float, 0.1),
    "frame_period_ms": (int, 80),
    "token_duration_min_ms": (int, 80),
    "token_duration_max_ms": (int, 480),
    "tokens_per_utt_min": (int, 4),
    "tokens_per_utt_max": (int, 10),
    "mix_target_min_ms": (int, 8000),
    "mix_target_max_ms": (int, 24000),
    "train_mixed_fraction": (float, 0.5),
    "label_bias_ms": (int, 0),
    "label_jitter_sigma_ms": (float, 0.0),
    # aligner model
    "model_dim": (int, 64),
    "n_layers": (int, 2),
    "n_heads": (int, 4),
    "step_ms": (int, 40),
    "max_duration_ms": (int, 30000),
    "max_seq_len": (int, 1024),
    # ctc model
    "ctc_model_dim": (int, 64),
    "ctc_n_layers": (int, 2),
    "ctc_n_heads": (int, 4),
    # schedule
    "steps": (int, 3000),
    "ctc_steps": (int, 1500),
    "batch_size": (int, 16),
    "warmup_steps": (int, 1000),
    "peak_lr": (float, 3e-4),
    "p_dynamic": (float, 0.5),
    "p_token": (float, 0.5),
    # bench sizes
    "train_count": (int, 2000),
    "suite_raw_count": (int, 32),
    "suite_mixed_count": (int, 8),
    # misc
    "seed": (int, 0),
    "log_every": (int, 100),
}


def parse_config(path) -> dict:
    """Flat key=value UTF-8 file; '#' starts a comment; unknown keys rejected."""
    cfg = {k: d for k, (_, d) in _CONFIG_KEYS.items()}
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}: line {lineno}: expected key=value, got {line!r}")
            key, _, value = line.partition("=")
            key = key.strip()
            if key not in _CONFIG_KEYS:
                raise ConfigError(f"{path}: line {lineno}: unknown key {key!r}")
            typ = _CONFIG_KEYS[key][0]
            try:
                cfg[key] = typ(value.strip())
            except ValueError as e:
                raise ConfigError(f"{path}: line {lineno}: bad value for {key}: {e}") from e
    return cfg


def write_resolved_config(cfg: dict, out_dir: Path) -> None:
    tmp = out_dir / "config.resolved.tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        for k in sorted(cfg):
            f.write(f"{k}={cfg[k]}\n")
    tmp.replace(out_dir / "config.resolved")


def corpus_config(cfg: dict, token_range=None) -> CorpusConfig:
    return CorpusConfig(
        vocab_size=cfg["vocab_size"],
        feat_dim=cfg["feat_dim"],
        noise_sigma=cfg["noise_sigma"],
        frame_period_ms=cfg["frame_period_ms"],
        token_duration_range_ms=(cfg["token_duration_min_ms"], cfg["token_duration_max_ms"]),
        tokens_per_utt_range=(cfg["tokens_per_utt_min"], cfg["tokens_per_utt_max"]),
        mix_target_range_ms=(cfg["mix_target_min_ms"], cfg["mix_target_max_ms"]),
        max_duration_ms=cfg["max_duration_ms"],
        rng_seed=cfg["seed"],
        token_range=token_range,
    )


def aligner_config(cfg: dict) -> aligner.AlignerConfig:
    return aligner.AlignerConfig(
        feat_dim=cfg["feat_dim"], model_dim=cfg["model_dim"],
        n_layers=cfg["n_layers"], n_heads=cfg["n_heads"],
        text_vocab_size=cfg["vocab_size"], step_ms=cfg["step_ms"],
        max_duration_ms=cfg["max_duration_ms"], max_seq_len=cfg["max_seq_len"])


def ctc_config(cfg: dict) -> ctc.CtcConfig:
    return ctc.CtcConfig(
        feat_dim=cfg["feat_dim"], model_dim=cfg["ctc_model_dim"],
        n_layers=cfg["ctc_n_layers"], n_heads=cfg["ctc_n_heads"],
        vocab_size=cfg["vocab_size"],
        max_frames=cfg["max_duration_ms"] // cfg["frame_period_ms"] + 1)


def schedule(cfg: dict, steps_key: str = "steps") -> aligner.TrainSchedule:
    return aligner.TrainSchedule(
        steps=cfg[steps_key], batch_size=cfg["batch_size"],
        peak_lr=cfg["peak_lr"], warmup_steps=cfg["warmup_steps"],
        p_dynamic=cfg["p_dynamic"], p_token=cfg["p_token"],
        seed=cfg["seed"], log_every=cfg["log_every"])


def generate_training_corpus(cfg: dict, count: int, seed_tag: int = 10) -> list[Utterance]:
    """Raw utterances plus long-form mixtures, mirroring the long-form mixing
    protocol at desk scale: a fraction of samples are concatenations drawn to a
    uniform target duration."""
    ccfg = corpus_config(cfg)
    protos = prototype_vectors(ccfg)
    rng = np.random.default_rng(np.random.SeedSequence([cfg["seed"], seed_tag]))
    n_mixed = int(count * cfg["train_mixed_fraction"])
    n_raw = count - n_mixed
    raws = [gen_utterance(ccfg, rng, f"raw{i:05d}", protos) for i in range(n_raw)]
    pool = [gen_utterance(ccfg, rng, f"pool{i:05d}", protos) for i in range(max(32, n_raw // 8))]
    mixed = []
    lo, hi = ccfg.mix_target_range_ms
    for i in range(n_mixed):
        target = int(rng.integers(lo, hi + 1))
        mixed.append(mix_long_form(pool, target, rng, ccfg.max_duration_ms, f"mix{i:05d}"))
    utts = raws + mixed
    if cfg["label_bias_ms"] or cfg["label_jitter_sigma_ms"] > 0:
        from .corpus import corrupt_labels
        utts = [corrupt_labels(u, cfg["label_bias_ms"], cfg["label_jitter_sigma_ms"], rng)
                for u in utts]
    return utts


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen(args) -> int:
    cfg = parse_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    utts = generate_training_corpus(cfg, args.count) if args.count else []
    write_manifest(out / "manifest.jsonl", utts, out / "feats")
    write_resolved_config(cfg, out)
    print(f"wrote {len(utts)} utterances to {out/'manifest.jsonl'}")
    return 0


def cmd_train(args) -> int:
    cfg = parse_config(args.config)
    utts = read_manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    acfg = aligner_config(cfg)
    params = aligner.init_model(acfg, seed=cfg["seed"])
    trace = aligner.train(params, acfg, utts, schedule(cfg),
                          log=lambda s, l, r: print(f"step {s} loss {l:.4f} lr {r:.2e}"))
    aligner.save_model(out / "aligner.ckpt", params, acfg)
    _write_trace(out / "loss_trace.tsv", trace)
    write_resolved_config(cfg, out)
    return 0


def _write_trace(path: Path, trace) -> None:
    tmp = path.with_suffix(".tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        f.write("step\tloss\tlr\n")
        for step, loss_v, lr in trace:
            f.write(f"{step}\t{loss_v:.6f}\t{lr:.6e}\n")
    tmp.replace(path)


def _parse_tokens_arg(spec: str, n_tokens: int):
    if spec == "all":
        return list(range(n_tokens))
    try:
        return [int(x) for x in spec.split(",") if x.strip() != ""]
    except ValueError as e:
        raise SlotRequestError(f"bad --tokens value {spec!r}") from e


def align_utterances(params, acfg, utts: list[Utterance], tokens_spec: str = "all"):
    results = []
    for u in utts:
        requested = _parse_tokens_arg(tokens_spec, len(u.tokens))
        seq = build_inference_sequence(u.tokens, requested, acfg.time_id)
        results.append(aligner.predict_slots(params, acfg, u.frames, seq, u.frame_period_ms))
    return results


def cmd_align(args) -> int:
    params, acfg, kind = aligner.load_model(args.checkpoint)
    utts = read_manifest(args.manifest)
    results = align_utterances(params, acfg, utts, args.tokens)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.with_suffix(out.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        for u, res in zip(utts, results):
            f.write(json.dumps({
                "id": u.id,
                "alignment": [list(e) for e in res.entries],
                "elapsed_ms": res.elapsed_ms,
                "forward_passes": res.forward_passes,
                "audio_duration_ms": res.audio_duration_ms,
            }) + "\n")
    tmp.replace(out)
    return 0


def cmd_eval(args) -> int:
    utts = {u.id: u for u in read_manifest(args.manifest)}
    results = []
    refs = []
    with open(args.alignments, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            u = utts[rec["id"]]
            res = aligner.AlignmentResult(
                [tuple(e) for e in rec["alignment"]],
                rec["elapsed_ms"], rec["forward_passes"], rec["audio_duration_ms"])
            results.append(res)
            refs.append(u.gold_spans if args.ref == "gold" else u.pseudo_spans)
    report = metrics.evaluate(results, refs, suite=Path(args.alignments).stem)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics.write_report(out / "report.json", report)
    metrics.write_shift_curve_tsv(out / "shift_curve.tsv", report.shift_curve)
    print(f"AAS {report.aas_ms:.1f} ms over {report.slot_count} slots")
    return 0


def run_bench(cfg: dict, out: Path, log=print) -> dict:
    """Generate suites, train slot model (with and without dynamic insertion)
    and the CTC baseline, align every suite with every method, and emit a
    combined report."""
    out.mkdir(parents=True, exist_ok=True)
    ccfg = corpus_config(cfg)
    spec = metrics.SuiteSpec(
        n_raw=cfg["suite_raw_count"], n_mixed=cfg["suite_mixed_count"],
        mixed_short_range_ms=(cfg["mix_target_min_ms"],
                              (cfg["mix_target_min_ms"] + cfg["mix_target_max_ms"]) // 2),
        mixed_long_range_ms=((cfg["mix_target_min_ms"] + cfg["mix_target_max_ms"]) // 2,
                             cfg["mix_target_max_ms"]),
        cross_token_range=(cfg["vocab_size"] // 2, cfg["vocab_size"]))
    suites = metrics.build_suites(ccfg, cfg["seed"] + 1000, spec)

    log("generating training corpus")
    train_utts = generate_training_corpus(cfg, cfg["train_count"])

    acfg = aligner_config(cfg)
    log("training slot model (dynamic insertion)")
    params = aligner.init_model(acfg, seed=cfg["seed"])
    trace = aligner.train(params, acfg, train_utts, schedule(cfg))
    aligner.save_model(out / "aligner.ckpt", params, acfg)
    _write_trace(out / "aligner_loss.tsv", trace)

    log("training CTC baseline")
    ctcfg = ctc_config(cfg)
    ctc_params = ctc.init_ctc_model(ctcfg, seed=cfg["seed"])
    ctc_trace = ctc.train_ctc(ctc_params, ctcfg, train_utts, schedule(cfg, "ctc_steps"))
    ctc.save_ctc_model(out / "ctc.ckpt", ctc_params, ctcfg)
    _write_trace(out / "ctc_loss.tsv", ctc_trace)

    report: dict = {"suites": {}}
    for name, utts in suites.items():
        log(f"aligning suite {name}")
        slot_results = align_utterances(params, acfg, utts)
        slot_rep = metrics.evaluate(slot_results, [u.gold_spans for u in utts], name)

        ctc_results = []
        for u in utts:
            t0 = time.perf_counter()
            lp = ctc.ctc_forward(ctc_params, ctcfg, u.frames).data
            try:
                spans = ctc.ctc_forced_align(lp, u.tokens, u.frame_period_ms, ctcfg.blank)
                entries = [(i, s.start_ms, s.end_ms) for i, s in enumerate(spans)]
            except ctc.InfeasibleAlignment:
                entries = []
            elapsed = (time.perf_counter() - t0) * 1000.0
            ctc_results.append(aligner.AlignmentResult(entries, elapsed, 1, u.duration_ms))
        ctc_rep = metrics.evaluate(ctc_results, [u.gold_spans for u in utts], name)

        report["suites"][name] = {"slot": slot_rep.to_json(), "ctc": ctc_rep.to_json()}
        metrics.write_shift_curve_tsv(out / f"shift_{name}_slot.tsv", slot_rep.shift_curve)
        metrics.write_shift_curve_tsv(out / f"shift_{name}_ctc.tsv", ctc_rep.shift_curve)

    tmp = out / "bench_report.json.tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    tmp.replace(out / "bench_report.json")
    write_resolved_config(cfg, out)
    return report


def cmd_bench(args) -> int:
    cfg = parse_config(args.config)
    run_bench(cfg, Path(args.out))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="slotalign")
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen", help="generate a synthetic corpus")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=None)
    g.set_defaults(fn=cmd_gen)

    t = sub.add_parser("train", help="train the slot-filling aligner")
    t.add_argument("--config", required=True)
    t.add_argument("--manifest", required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(fn=cmd_train)

    a = sub.add_parser("align", help="align a manifest with a trained model")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--manifest", required=True)
    a.add_argument("--tokens", default="all", help='"all" or comma-separated token indices')
    a.add_argument("--out", required=True)
    a.set_defaults(fn=cmd_align)

    e = sub.add_parser("eval", help="score an alignment file")
    e.add_argument("--alignments", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--ref", choices=("gold", "pseudo"), default="gold")
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_eval)

    b = sub.add_parser("bench", help="end-to-end comparative benchmark")
    b.add_argument("--config", required=True)
    b.add_argument("--out", required=True)
    b.set_defaults(fn=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except FileNotFoundError as e:
        print(f"error: missing file: {e}", file=sys.stderr)
        return EXIT_MISSING_FILE
    except (ManifestError, json.JSONDecodeError) as e:
        print(f"error: parse failure: {e}", file=sys.stderr)
        return EXIT_PARSE
    except (ConfigError, SlotRequestError, GridError, ValueError) as e:
        print(f"error: invalid config or request: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``python -m desktts <subcommand> [--config FILE] [--set k=v ...]``.

Exit codes: 0 ok, 1 runtime failure, 2 configuration or usage error. Outputs
go under the config's ``output_dir`` unless ``DESKTTS_OUTPUT_ROOT`` is set.
Every run writes ``manifest.json`` listing its artifacts and the config hash.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, dump_toml, load_config

log = logging.getLogger("desktts")


class UsageError(ValueError):
    pass


def _rates(text: str) -> list[int]:
    try:
        rates = [int(x) for x in text.split(",") if x]
    except ValueError:
        raise UsageError(f"--rates: expected comma-separated integers, got {text!r}") from None
    for r in rates:
        if r not in (25, 50):
            raise UsageError(f"--rates: token rate must be 25 or 50, got {r}")
    return rates


def _strategy(text: str) -> str:
    from .textproc import Strategy

    try:
        return Strategy.parse(text).value
    except ValueError as exc:
        raise UsageError(f"--strategy: {exc}") from None


def _lang_spans(text: str | None, n: int) -> list[tuple[int, int, int]]:
    if not text:
        return [(0, n, 0)] if n else []
    spans = []
    for part in text.split(","):
        try:
            a, b, lang = (int(x) for x in part.split(":"))
        except ValueError:
            raise UsageError(f"--lang-spans: expected start:end:lang[,...], got {part!r}") from None
        spans.append((a, b, lang))
    return spans


class Run:
    """Per-invocation output directory plus the artifact manifest."""

    def __init__(self, cfg: ExperimentConfig, name: str):
        self.cfg = cfg
        self.dir = cfg.output_root / f"{name}-{cfg.hash}"
        self.dir.mkdir(parents=True, exist_ok=True)
        self.cache = cfg.output_root / "checkpoints"
        self.artifacts: list[str] = []
        (self.dir / "config.toml").write_text(dump_toml(cfg), encoding="utf-8")
        self.add(self.dir / "config.toml")

    def add(self, path: Path) -> Path:
        self.artifacts.append(str(path))
        return path

    def finish(self, command: str) -> None:
        body = {"command": command, "config_hash": self.cfg.hash, "seed": self.cfg.seed, "artifacts": self.artifacts}
        (self.dir / "manifest.json").write_text(json.dumps(body, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _codec(cfg, run: Run, rate: int):
    from . import recipes

    return recipes.build_codec(cfg, rate, run.cache)


def cmd_ingest(args, cfg: ExperimentConfig, run: Run) -> None:
    from . import datapipe

    d = cfg.datapipe
    pcfg = datapipe.PipelineConfig(d.separation_threshold, d.max_dur, d.max_gap_s, d.tau_audio, d.tau_text, workers=d.workers)
    out = Path(args.manifest) if args.manifest else run.dir / "manifest.jsonl"
    recs = datapipe.ingest(args.sidecars, out, pcfg)
    run.add(out)
    print(f"{sum(r.kept for r in recs)}/{len(recs)} records kept -> {out}")


def cmd_codec_train(args, cfg, run) -> None:
    from . import codec, recipes

    for rate in _rates(args.rates):
        m = _codec(cfg, run, rate)
        path = run.add(run.dir / f"codec_{rate}.ckpt")
        codec.save_codec(path, m)
        stats = codec.codebook_stats([u.mel for u in recipes.codec_corpus(cfg)[:20]], m)
        print(json.dumps(stats, sort_keys=True))


def cmd_codec_encode(args, cfg, run) -> None:
    from . import codec

    m = codec.load_codec(args.checkpoint) if args.checkpoint else _codec(cfg, run, args.rate)
    toks = codec.encode(_load_mel(args.input), m)
    out = run.add(run.dir / (Path(args.input).stem + ".tokens.json"))
    out.write_text(json.dumps({"token_rate_hz": toks.token_rate_hz, "ids": toks.ids.tolist()}) + "\n", encoding="utf-8")
    print(f"{len(toks)} tokens at {toks.token_rate_hz} Hz -> {out}")


def cmd_codec_stats(args, cfg, run) -> None:
    from . import codec, recipes

    rows = []
    for rate in _rates(args.rates):
        m = _codec(cfg, run, rate)
        corpus = [u.mel for u in recipes.codec_corpus(cfg)]
        rows.append(dict(codec.codebook_stats(corpus, m), recon_mse=codec.reconstruction_mse(corpus, m)))
    out = run.add(run.dir / "codec_stats.json")
    out.write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(out.read_text(encoding="utf-8"), end="")


def cmd_t2s_train(args, cfg, run) -> None:
    from . import recipes, t2s

    rate = args.rate
    c = _codec(cfg, run, rate)
    strategies = [_strategy(args.strategy)] if args.strategy else cfg.t2s.strategies
    for s in strategies:
        m = recipes.build_t2s(cfg, s, rate, c, fusion=args.fusion, cache_dir=run.cache)
        path = run.add(run.dir / f"t2s_{s}_{m.config.fusion}_{rate}.ckpt")
        t2s.save_t2s(path, m, {"comparison_hash": m.comparison_hash})
        print(f"{s}: final loss {m.loss_history[-1]['loss']:.4f}" if m.loss_history else f"{s}: loaded from cache")


def cmd_s2m_train(args, cfg, run) -> None:
    from . import recipes, s2m

    c = _codec(cfg, run, args.rate)
    m = recipes.build_s2m(cfg, args.rate, c, backbone=args.backbone, cache_dir=run.cache)
    path = run.add(run.dir / f"s2m_{m.config.backbone.kind}_{args.rate}.ckpt")
    s2m.save_s2m(path, m)
    print(f"s2m {m.config.backbone.kind}: {s2m.count_parameters(m)} parameters -> {path}")


def cmd_s2m_sample(args, cfg, run) -> None:
    from . import recipes, s2m
    from .codec import SemanticTokens

    c = _codec(cfg, run, args.rate)
    m = recipes.build_s2m(cfg, args.rate, c, cache_dir=run.cache)
    d = json.loads(Path(args.tokens).read_text(encoding="utf-8"))
    toks = SemanticTokens(np.asarray(d["ids"], dtype=np.int64), d["token_rate_hz"])
    mel = s2m.sample_mel(s2m.S2MCondition(toks, _load_ref(args.ref), m.config.upsample_factor), m, args.steps or cfg.s2m.sample_steps, seed=cfg.seed)
    out = run.add(run.dir / (Path(args.tokens).stem + ".mel.npy"))
    np.save(out, mel.frames)
    print(f"{mel.n_frames} mel frames -> {out}")


def cmd_grpo(args, cfg, run) -> None:
    from . import recipes, t2s

    strategy = _strategy(args.strategy)
    c = _codec(cfg, run, args.rate)
    model = recipes.build_t2s(cfg, strategy, args.rate, c, cache_dir=run.cache)
    oracle = recipes.build_oracle(cfg, c)
    report_path = run.add(run.dir / "grpo_report.jsonl")
    model, _, summary = recipes.run_grpo_recipe(cfg, model, oracle, report_path=report_path)
    ck = run.add(run.dir / f"t2s_{strategy}_grpo_{args.rate}.ckpt")
    t2s.save_t2s(ck, model, {"grpo": True})
    run.add(run.dir / "grpo_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"held-out oracle WER {summary['heldout_wer_before']:.4f} -> {summary['heldout_wer_after']:.4f}")


def _load_mel(path: str):
    from .audio import MelSpectrogram, read_wav, wave_to_mel

    p = Path(path)
    if p.suffix == ".npy":
        return MelSpectrogram(np.load(p))
    return wave_to_mel(read_wav(p))


def _load_ref(ref: str):
    from . import recipes

    if ref.startswith("speaker:"):
        try:
            sid = int(ref.split(":", 1)[1])
        except ValueError:
            raise UsageError(f"--ref: bad speaker id in {ref!r}") from None
        refs = recipes.speaker_refs()
        if sid not in refs:
            raise UsageError(f"--ref: speaker id must lie in [0, {len(refs)})")
        return refs[sid].mel
    if not Path(ref).exists():
        raise UsageError(f"--ref: no such file {ref!r}")
    return _load_mel(ref)


def cmd_synth(args, cfg, run) -> None:
    from . import recipes
    from .audio import write_wav
    from .t2s import DurationSpec, FREE
    from .textproc import tokenize

    strategy = _strategy(args.strategy)
    try:
        tokens = tokenize(args.text, _lang_spans(args.lang_spans, len(args.text)))
    except ValueError as exc:
        raise UsageError(f"--text: {exc}") from None
    ref = _load_ref(args.ref)
    c = _codec(cfg, run, args.rate)
    tm = recipes.build_t2s(cfg, strategy, args.rate, c, cache_dir=run.cache)
    sm = recipes.build_s2m(cfg, args.rate, c, cache_dir=run.cache)
    dur = DurationSpec.fixed(args.tokens) if args.tokens else FREE
    res = recipes.synthesize(tokens, ref, tm, sm, duration=dur, s2m_steps=cfg.s2m.sample_steps, seed=cfg.seed)
    stem = args.out or f"synth_{strategy}_{args.rate}"
    wav = run.add(run.dir / f"{stem}.wav")
    write_wav(wav, res.wave)
    side = {
        "text": args.text,
        "strategy": strategy,
        "token_rate_hz": args.rate,
        "tokens": res.tokens.ids.tolist(),
        "truncated": res.tokens.truncated,
        "timings": res.timings,
        "sample_rate_hz": res.wave.sample_rate_hz,
        "config_hash": cfg.hash,
    }
    run.add(run.dir / f"{stem}.json").write_text(json.dumps(side, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"{res.timings['audio_s']:.2f} s of audio -> {wav}")


def _eval_models(cfg, run, rate, ablation: bool):
    from . import recipes

    c = _codec(cfg, run, rate)
    models = {s: recipes.build_t2s(cfg, s, rate, c, cache_dir=run.cache) for s in cfg.t2s.strategies}
    if ablation:
        models["token_concat/no_lang"] = recipes.build_t2s(cfg, "token_concat", rate, c, fusion="none", cache_dir=run.cache)
    return c, models


def cmd_eval(args, cfg, run, ablation: bool = False) -> None:
    from . import evalkit, recipes

    e = cfg.eval
    c, models = _eval_models(cfg, run, args.rate, ablation)
    oracle = recipes.build_oracle(cfg, c)
    bench = evalkit.make_homograph_bench(e.n_per_density, e.bench_seed, e.densities)
    report = evalkit.run_strategy_comparison(models, bench, c, oracle, seeds=[cfg.seed], metadata={"hardware": "cpu", "token_rate_hz": args.rate})
    if ablation:
        long_bench = evalkit.make_homograph_bench(e.n_per_density, e.bench_seed + 1, [0.5], e.long_min_len, e.long_max_len, name="homograph_long")
        long_rep = evalkit.run_strategy_comparison(models, long_bench, c, oracle, seeds=[cfg.seed])
        report.rows.extend(long_rep.rows)
    path = run.dir / ("comparison.json" if ablation else "eval.json")
    report.save(path)
    run.add(path)
    run.add(path.with_suffix(".md"))
    print(report.to_markdown(), end="")


def cmd_bench_rtf(args, cfg, run) -> None:
    from . import recipes

    rows = recipes.bench_rtf(cfg, _rates(args.rates), [b for b in args.backbones.split(",") if b], seconds=args.seconds)
    out = run.add(run.dir / "rtf.json")
    out.write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    md = run.add(run.dir / "rtf.md")
    md.write_text(recipes.rtf_table_markdown(rows), encoding="utf-8")
    print(md.read_text(encoding="utf-8"), end="")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML experiment config (defaults are used if omitted)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override one config value")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="desktts", description="Desk-scale multilingual TTS cascade experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", parents=[common], help="curate sidecar-annotated sources into a JSONL manifest")
    s.add_argument("sidecars", nargs="+")
    s.add_argument("--manifest")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("codec-train", parents=[common], help="train semantic codecs")
    s.add_argument("--rates", default="25,50")
    s.set_defaults(func=cmd_codec_train)
    codec_p = sub.add_parser("codec", help="codec utilities")
    csub = codec_p.add_subparsers(dest="codec_command", required=True)
    s = csub.add_parser("train", parents=[common])
    s.add_argument("--rates", default="25,50")
    s.set_defaults(func=cmd_codec_train)
    s = csub.add_parser("encode", parents=[common])
    s.add_argument("input", help=".wav or .npy mel")
    s.add_argument("--rate", type=int, default=25)
    s.add_argument("--checkpoint")
    s.set_defaults(func=cmd_codec_encode)
    s = csub.add_parser("stats", parents=[common])
    s.add_argument("--rates", default="25,50")
    s.set_defaults(func=cmd_codec_stats)

    s = sub.add_parser("t2s-train", parents=[common], help="train T2S models")
    s.add_argument("--strategy")
    s.add_argument("--rate", type=int, default=25, choices=(25, 50))
    s.add_argument("--fusion", choices=("add", "concat_proj", "none"))
    s.set_defaults(func=cmd_t2s_train)

    def add_s2m_train(parent, name, **kw):
        s = parent.add_parser(name, parents=[common], **kw)
        s.add_argument("--rate", type=int, default=25, choices=(25, 50))
        s.add_argument("--backbone", choices=("udit_like", "zipformer_like"))
        s.set_defaults(func=cmd_s2m_train)

    add_s2m_train(sub, "s2m-train", help="train the S2M model")
    s2m_p = sub.add_parser("s2m", help="S2M utilities")
    ssub = s2m_p.add_subparsers(dest="s2m_command", required=True)
    add_s2m_train(ssub, "train")
    s = ssub.add_parser("sample", parents=[common])
    s.add_argument("tokens", help="tokens JSON written by 'codec encode'")
    s.add_argument("--ref", required=True)
    s.add_argument("--rate", type=int, default=25, choices=(25, 50))
    s.add_argument("--steps", type=int)
    s.set_defaults(func=cmd_s2m_sample)

    s = sub.add_parser("grpo", parents=[common], help="GRPO post-training against the oracle reward")
    s.add_argument("--strategy", default="token_concat")
    s.add_argument("--rate", type=int, default=25, choices=(25, 50))
    s.set_defaults(func=cmd_grpo)

    s = sub.add_parser("synth", parents=[common], help="text + reference clip -> WAV")
    s.add_argument("--text", required=True)
    s.add_argument("--ref", required=True, help="reference .wav, .npy mel, or speaker:N")
    s.add_argument("--strategy", default="token_concat")
    s.add_argument("--rate", type=int, default=25, choices=(25, 50))
    s.add_argument("--lang-spans", help="start:end:lang,... (default: whole text in language 0)")
    s.add_argument("--tokens", type=int, help="fix the semantic token count")
    s.add_argument("--out", help="output file stem")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("eval", parents=[common], help="homograph-bench evaluation of the configured strategies")
    s.add_argument("--rate", type=int, default=25, choices=(25, 50))
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("compare-strategies", parents=[common], help="strategy comparison including the no-language ablation")
    s.add_argument("--rate", type=int, default=25, choices=(25, 50))
    s.set_defaults(func=lambda a, c, r: cmd_eval(a, c, r, ablation=True))

    s = sub.add_parser("bench-rtf", parents=[common], help="T2S/S2M real-time factors per token rate and backbone")
    s.add_argument("--rates", default="25,50")
    s.add_argument("--backbones", default="udit_like,zipformer_like")
    s.add_argument("--seconds", type=float)
    s.set_defaults(func=cmd_bench_rtf)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    command = args.command + (f" {getattr(args, 'codec_command', '') or getattr(args, 's2m_command', '')}".rstrip())
    try:
        cfg = load_config(args.config, args.overrides)
        if hasattr(args, "strategy") and args.strategy:
            _strategy(args.strategy)
        run = Run(cfg, command.replace(" ", "-"))
        args.func(args, cfg, run)
        run.finish(command)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - top-level runtime failure
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())


def main_entry() -> None:
    sys.exit(main())

"""Command-line entry point: ``cuprosody <command> ...`` (or ``python -m cuprosody``).

Data directory (written by ``prepare``)::

    manifest.jsonl   utterance records; mel_path relative to this directory
    lexicon.txt      word TAB phonemes
    mels/            one MEL80 file per utterance
    synthetic.json   generator spec (synthetic corpora only)
    embeddings/      one embedding cache per backend (written by ``embed``)

Run directory (written by ``train``)::

    config.json      model config, training config, data/backend settings
    trace.csv        one row per step: losses, plus validation metrics when evaluated
    checkpoints/     step_<N>.ckpt and latest.ckpt
    reports/         eval / synth / ablate outputs for checkpoints of this run
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import re
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .corpus import (
    Corpus, Lexicon, ManifestRecord, PhonemeInventory, SyntheticSpec, context_blind_floor, g2p,
    generate_synthetic, parse_manifest, split, write_manifest,
)
from .cu_encoder import AttentionConfig
from .errors import BackendError, CUError, InvalidInputError, NotFoundError, TrainingDivergenceError
from .features import (
    griffin_lim, load_audio, mel_spectrogram, save_audio, save_heatmap, trim_silence, write_mel,
)
from .taco_lite import (
    ModelConfig, TacoLite, TrainConfig, evaluate, load_checkpoint, make_utterance,
    prepare_utterances, save_checkpoint, synthesize, train,
)
from .text_context import (
    EmbeddingCache, build_window, embed_window_cse, embed_window_pse, make_backend,
    window_from_texts,
)

log = logging.getLogger("cuprosody")

EXIT_OK, EXIT_INVALID, EXIT_BACKEND, EXIT_DIVERGED = 0, 2, 3, 4

MANIFEST, LEXICON, SYNTHETIC, EMBEDDINGS, MELS = (
    "manifest.jsonl", "lexicon.txt", "synthetic.json", "embeddings", "mels")


# --------------------------------------------------------------------------
# helpers

def _on_off(value):
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return value == "on"


def _cache_path(data_dir, backend_id):
    return Path(data_dir) / EMBEDDINGS / (re.sub(r"[^\w.-]+", "_", backend_id) + ".cache")


def _load_data(data_dir):
    data_dir = Path(data_dir)
    if not (data_dir / MANIFEST).exists():
        raise NotFoundError(f"{data_dir} has no {MANIFEST}; run `cuprosody prepare` first")
    corpus = parse_manifest(data_dir / MANIFEST)
    lang = corpus.records[0].language if len(corpus) else "en"
    lexicon = Lexicon.load(data_dir / LEXICON, lang) if (data_dir / LEXICON).exists() else Lexicon({}, lang)
    spec = None
    if (data_dir / SYNTHETIC).exists():
        spec = SyntheticSpec.from_json((data_dir / SYNTHETIC).read_text(encoding="utf-8"))
    return corpus, lexicon, spec


def _inventory(corpus, lexicon):
    extra = sorted({s for rec in corpus.records for s in g2p(rec.text, lexicon, rec.language).symbols})
    return PhonemeInventory.from_lexicon(lexicon, extra=extra)


def _backend(spec, dim, lexicon):
    return make_backend(spec, dim=dim, vocab=sorted(lexicon.entries))


def _open_cache(data_dir, backend):
    path = _cache_path(data_dir, backend.backend_id)
    path.parent.mkdir(parents=True, exist_ok=True)
    return EmbeddingCache(backend.dim, path)


def _model_config(args, n_symbols, embedding_dim):
    factory = ModelConfig.full if args.scale == "full" else ModelConfig.toy
    base = factory(n_symbols)
    att = AttentionConfig(
        heads=args.heads or base.attention.heads,
        d_k=args.dk or base.attention.d_k,
        d_v=args.dk or base.attention.d_v,
        context_dim=args.context_dim or base.attention.context_dim,
    )
    return factory(n_symbols, cu_mode=args.cu_mode, context_width=args.context_width,
                   embedding_dim=embedding_dim, attention=att,
                   dropout_at_inference=args.dropout_at_inference)


def _load_for_inference(path, dropout_at_inference=None):
    ck = load_checkpoint(path, with_optimizer=False)
    if dropout_at_inference is not None and dropout_at_inference != ck.config.dropout_at_inference:
        ck.config.dropout_at_inference = dropout_at_inference
        ck.model.cfg.dropout_at_inference = dropout_at_inference
    extra = ck.meta
    lexicon = Lexicon({k: tuple(v) for k, v in extra["lexicon"].items()}, extra.get("language", "en"))
    inventory = PhonemeInventory(extra["inventory"][1:])
    backend = None
    if ck.config.cu_mode != "none":
        backend = make_backend(extra["backend"], dim=ck.config.embedding_dim, vocab=extra.get("vocab", ()))
    return ck, lexicon, inventory, backend


def _run_dir_of(checkpoint):
    p = Path(checkpoint).resolve()
    if p.parent.name == "checkpoints" and (p.parent.parent / "config.json").exists():
        return p.parent.parent
    return None


def _reports_dir(args):
    if args.out:
        out = Path(args.out)
    else:
        run = _run_dir_of(args.checkpoint)
        out = (run / "reports") if run else Path("reports")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _generator(seed):
    return torch.Generator().manual_seed(seed)


# --------------------------------------------------------------------------
# commands

def cmd_prepare(args):
    out = Path(args.out)
    (out / MELS).mkdir(parents=True, exist_ok=True)
    if args.synthetic:
        if args.synthetic == "default":
            spec = SyntheticSpec.default(n_classes=args.classes, noise_sigma=args.noise, seed=args.seed)
        else:
            spec = SyntheticSpec.from_json(Path(args.synthetic).read_text(encoding="utf-8"))
        corpus = generate_synthetic(spec, args.paragraphs, seed=args.seed)
        (out / SYNTHETIC).write_text(spec.to_json(), encoding="utf-8")
        spec.lexicon.save(out / LEXICON)
        src_dir = None
    else:
        if not args.manifest:
            raise InvalidInputError("prepare needs a manifest or --synthetic")
        src = Path(args.manifest)
        corpus = parse_manifest(src, load_targets=False)
        src_dir = src.parent
        if args.lexicon:
            Lexicon.load(args.lexicon, corpus.records[0].language).save(out / LEXICON)
    records = []
    n_mel = n_silent = 0
    for rec in corpus.records:
        rel = f"{MELS}/{rec.paragraph_id}_{rec.sentence_index:04d}.mel"
        if src_dir is None:
            write_mel(corpus.targets[rec.key], out / rel)
        elif rec.audio_path:
            clip = trim_silence(load_audio(src_dir / rec.audio_path), args.trim_db)
            if clip.silent or len(clip) < 800:
                log.warning("%s/%d: no speech after trimming; kept as context only",
                            rec.paragraph_id, rec.sentence_index)
                n_silent += 1
                records.append(replace(rec, mel_path=None))
                continue
            write_mel(mel_spectrogram(clip).values, out / rel)
        else:
            records.append(replace(rec, mel_path=None))
            continue
        n_mel += 1
        records.append(replace(rec, mel_path=rel))
    write_manifest(Corpus(records), out / MANIFEST)
    print(f"prepared {len(records)} utterances ({n_mel} with mels, {n_silent} silent) in {out}")
    if src_dir is None:
        print(f"context-blind floor: {context_blind_floor(spec):.6f}")
    return EXIT_OK


def cmd_embed(args):
    corpus, lexicon, _ = _load_data(args.data)
    backend = _backend(args.backend, args.embedding_dim, lexicon)
    cache = _open_cache(args.data, backend)
    before = len(cache)
    modes = ("cse", "pse") if args.cu_mode == "both" else (args.cu_mode,)
    if "none" in modes:
        print("cu-mode none needs no embeddings")
        return EXIT_OK
    for rec in corpus.records:
        window = build_window(corpus, rec.paragraph_id, rec.sentence_index, args.context_width)
        if "cse" in modes:
            embed_window_cse(window, backend, cache)
        if "pse" in modes:
            embed_window_pse(window, backend, cache)
    cache.save()
    print(f"{backend.backend_id}: {len(cache) - before} new embeddings, {len(cache)} cached "
          f"-> {_cache_path(args.data, backend.backend_id)}")
    return EXIT_OK


def _split_keys(corpus, args):
    with_targets = Corpus(corpus.records, corpus.targets)
    keys = [k for k in corpus.keys() if k in corpus.targets]
    if len(keys) != len(corpus):
        # split only over utterances that have targets
        order = np.random.default_rng(args.split_seed).permutation(len(keys))
        n_val, n_test = args.n_val, args.n_test
        if len(keys) <= n_val + n_test:
            raise InvalidInputError(f"insufficient data: {len(keys)} utterances with targets")
        sh = [keys[i] for i in order]
        return sorted(sh[n_val + n_test:]), sorted(sh[:n_val]), sorted(sh[n_val:n_val + n_test])
    return split(with_targets, args.split_seed, args.n_val, args.n_test)


def cmd_train(args):
    torch.manual_seed(args.seed)
    corpus, lexicon, spec = _load_data(args.data)
    run = Path(args.run)
    (run / "checkpoints").mkdir(parents=True, exist_ok=True)
    (run / "reports").mkdir(exist_ok=True)

    if args.resume:
        ck = load_checkpoint(args.resume)
        model, optimizer, start = ck.model, ck.optimizer, ck.step
        cfg = ck.config
        inventory = PhonemeInventory(ck.meta["inventory"][1:])
    else:
        inventory = _inventory(corpus, lexicon)
        cfg = _model_config(args, len(inventory), args.embedding_dim)
        model, optimizer, start = TacoLite(cfg), None, 0
    backend = cache = None
    if cfg.cu_mode != "none":
        backend = _backend(args.backend, cfg.embedding_dim, lexicon)
        cache = _open_cache(args.data, backend)

    tr_keys, va_keys, _ = _split_keys(corpus, args)
    tr = prepare_utterances(corpus, tr_keys, lexicon, inventory, cfg.cu_mode, cfg.context_width, backend, cache)
    va = prepare_utterances(corpus, va_keys, lexicon, inventory, cfg.cu_mode, cfg.context_width, backend, cache)
    if cache is not None:
        cache.save()

    tcfg = TrainConfig(steps=args.steps, batch_size=args.batch_size, lr=args.lr, optimizer=args.optimizer,
                       val_every=args.val_every, seed=args.seed)
    meta = {
        "inventory": inventory.symbols, "lexicon": {k: list(v) for k, v in lexicon.entries.items()},
        "language": lexicon.language, "backend": args.backend, "vocab": sorted(lexicon.entries),
        "data": str(Path(args.data).resolve()), "split_seed": args.split_seed,
        "n_val": args.n_val, "n_test": args.n_test,
    }
    config = {"version": __version__, "model": cfg.to_dict(), "train": tcfg.to_dict(), **{
        k: meta[k] for k in ("backend", "data", "split_seed", "n_val", "n_test")}}
    if spec is not None:
        config["context_blind_floor"] = context_blind_floor(spec)
    (run / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True), encoding="utf-8")

    trace_path = run / "trace.csv"
    fields = ["step", "total", "mel_pre", "mel_post", "stop", "val_tf_loss", "val_free_mse"]
    fh = open(trace_path, "a" if args.resume and trace_path.exists() else "w", newline="")
    writer = csv.DictWriter(fh, fieldnames=fields, restval="")
    if fh.tell() == 0:
        writer.writeheader()

    holder = {}

    def on_step(step, row):
        writer.writerow(row)
        if args.checkpoint_every and step % args.checkpoint_every == 0:
            save_checkpoint(run / "checkpoints" / f"step_{step}.ckpt", model, holder.get("opt"), step, args.seed, meta)
        return False

    if optimizer is None:
        from .taco_lite.train import make_optimizer
        optimizer = make_optimizer(model, tcfg)
    holder["opt"] = optimizer
    try:
        optimizer, trace = train(model, tr, tcfg, val_utts=va, optimizer=optimizer, start_step=start,
                                 callback=on_step)
    finally:
        fh.close()
    step = start + len(trace)
    save_checkpoint(run / "checkpoints" / f"step_{step}.ckpt", model, optimizer, step, args.seed, meta)
    save_checkpoint(run / "checkpoints" / "latest.ckpt", model, optimizer, step, args.seed, meta)
    last = trace[-1]
    msg = f"trained to step {step}: loss {last['total']:.4f}"
    if "val_free_mse" in last:
        msg += f", val free-running MSE {last['val_free_mse']:.4f}"
        if "context_blind_floor" in config:
            msg += f" ({last['val_free_mse'] / config['context_blind_floor']:.3f} x floor)"
    print(msg)
    return EXIT_OK


def _read_paragraph(path):
    lines = [ln.strip() for ln in Path(path).read_text(encoding="utf-8").splitlines()]
    lines = [ln for ln in lines if ln]
    if not lines:
        raise InvalidInputError(f"{path}: no sentences")
    return lines


def cmd_synth(args):
    ck, lexicon, inventory, backend = _load_for_inference(args.checkpoint, args.dropout_at_inference)
    sentences = _read_paragraph(args.paragraph)
    if not 0 <= args.index < len(sentences):
        raise InvalidInputError(f"--index {args.index} outside paragraph of {len(sentences)} sentences")
    corpus = Corpus([ManifestRecord("synth", i, t) for i, t in enumerate(sentences)])
    window = build_window(corpus, "synth", args.index, ck.config.context_width)
    utt = make_utterance(("synth", args.index), window.center, lexicon, inventory, window,
                         ck.config.cu_mode, backend)
    res = synthesize(ck.model, utt, args.max_steps, generator=_generator(args.seed))
    out = _reports_dir(args)
    stem = args.name or f"synth_{Path(args.paragraph).stem}_{args.index}"
    write_mel(res.mel, out / f"{stem}.mel")
    if args.heatmap:
        save_heatmap([res.mel], out / f"{stem}.png", titles=[window.center])
    if args.audio:
        save_audio(griffin_lim(res.mel, iterations=args.griffin_lim_iters), out / f"{stem}.wav")
    state = f"stopped at step {res.stop_step}" if res.stopped else "no-stop (max steps reached)"
    print(f"{res.mel.shape[0]} frames, {state} -> {out / stem}.*")
    return EXIT_OK


def ablation_report(model, lexicon, inventory, backend, sentence, previous, generator_seed=0,
                    max_steps=None, following=()):
    """Synthesize ``sentence`` once per alternative previous sentence (dropout off).

    Returns ``(mels, pairs)`` where pairs are ``(i, j, mean |mel_i - mel_j|)``
    over the overlapping frames.
    """
    cfg = model.cfg
    saved = cfg.dropout_at_inference
    cfg.dropout_at_inference = False
    try:
        mels = []
        L = cfg.context_width
        future = (list(following) + [None] * L)[:L]
        for prev in previous:
            window = window_from_texts(sentence, ([None] * L + [prev])[-L:] if L else [], future)
            utt = make_utterance(("ablate", len(mels)), sentence, lexicon, inventory, window,
                                 cfg.cu_mode, backend)
            mels.append(synthesize(model, utt, max_steps, generator=_generator(generator_seed)).mel)
    finally:
        cfg.dropout_at_inference = saved
    pairs = []
    for i in range(len(mels)):
        for j in range(i + 1, len(mels)):
            n = min(len(mels[i]), len(mels[j]))
            diff = np.abs(mels[i][:n].astype(np.float64) - mels[j][:n].astype(np.float64))
            pairs.append((i, j, float(diff.mean()) if n else 0.0))
    return mels, pairs


def cmd_ablate(args):
    ck, lexicon, inventory, backend = _load_for_inference(args.checkpoint)
    if len(args.previous) < 2:
        raise InvalidInputError("ablate needs at least two alternative previous sentences")
    steps = args.max_steps
    mels, pairs = ablation_report(ck.model, lexicon, inventory, backend, args.sentence, args.previous,
                                  args.seed, steps, args.following or ())
    out = _reports_dir(args)
    stem = args.name or "ablation"
    report = {
        "checkpoint": str(args.checkpoint), "cu_mode": ck.config.cu_mode, "sentence": args.sentence,
        "previous": args.previous, "frames": [len(m) for m in mels],
        "pairs": [{"i": i, "j": j, "mean_abs_diff": d} for i, j, d in pairs],
    }
    (out / f"{stem}.json").write_text(json.dumps(report, indent=2), encoding="utf-8")
    save_heatmap(mels, out / f"{stem}.png", titles=[f"prev: {p}" for p in args.previous])
    for i, j, d in pairs:
        print(f"{i} vs {j}: mean |diff| = {d:.6f}")
    print(f"report -> {out / stem}.json")
    return EXIT_OK


def cmd_eval(args):
    ck, lexicon, inventory, backend = _load_for_inference(args.checkpoint)
    data = args.data or ck.meta.get("data")
    corpus, _, spec = _load_data(data)
    ns = argparse.Namespace(split_seed=ck.meta.get("split_seed", 0), n_val=ck.meta.get("n_val", 100),
                            n_test=ck.meta.get("n_test", 100))
    tr, va, te = _split_keys(corpus, ns)
    keys = {"train": tr, "val": va, "test": te}[args.split]
    cache = _open_cache(data, backend) if backend is not None else None
    utts = prepare_utterances(corpus, keys, lexicon, inventory, ck.config.cu_mode, ck.config.context_width,
                              backend, cache)
    res = evaluate(ck.model, utts)
    res.update(split=args.split, n=len(utts), step=ck.step)
    if spec is not None:
        res["context_blind_floor"] = context_blind_floor(spec)
        res["ratio_to_floor"] = res["val_free_mse"] / res["context_blind_floor"]
    out = _reports_dir(args)
    (out / f"eval_{args.split}_step{ck.step}.json").write_text(json.dumps(res, indent=2), encoding="utf-8")
    print(json.dumps(res, indent=2))
    return EXIT_OK


def cmd_selftest(args):
    from .selftest import run_all
    return EXIT_OK if run_all() else 1


# --------------------------------------------------------------------------
# parser

def build_parser():
    p = argparse.ArgumentParser(prog="cuprosody", description="Cross-utterance context conditioning for TTS.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--threads", type=int, default=1, help="torch intra-op threads (1 = deterministic)")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, model_flags=False):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--backend", default="stub", help="stub | pretrained:<name>")
        sp.add_argument("--embedding-dim", type=int, default=768, help="stub backend width")
        sp.add_argument("--context-width", type=int, default=2, metavar="L")
        if model_flags:
            sp.add_argument("--cu-mode", choices=("none", "cse", "pse"), default="pse")
            sp.add_argument("--heads", type=int)
            sp.add_argument("--dk", type=int)
            sp.add_argument("--context-dim", type=int)
            sp.add_argument("--dropout-at-inference", type=_on_off, default=False, metavar="{on,off}")

    sp = sub.add_parser("prepare", help="audio -> trimmed mels, or generate a synthetic corpus")
    sp.add_argument("manifest", nargs="?")
    sp.add_argument("--out", required=True)
    sp.add_argument("--lexicon")
    sp.add_argument("--synthetic", metavar="SPEC", help="spec JSON file, or 'default'")
    sp.add_argument("--paragraphs", type=int, default=200)
    sp.add_argument("--classes", type=int, default=2)
    sp.add_argument("--noise", type=float, default=0.05)
    sp.add_argument("--trim-db", type=float, default=-40.0)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_prepare)

    sp = sub.add_parser("embed", help="precompute and cache CSE/PSE embeddings")
    sp.add_argument("data")
    common(sp)
    sp.add_argument("--cu-mode", choices=("none", "cse", "pse", "both"), default="pse")
    sp.set_defaults(func=cmd_embed)

    sp = sub.add_parser("train", help="train a model into a run directory")
    sp.add_argument("data")
    sp.add_argument("--run", required=True)
    common(sp, model_flags=True)
    sp.add_argument("--scale", choices=("toy", "full"), default="toy")
    sp.add_argument("--steps", type=int, default=1000)
    sp.add_argument("--batch-size", type=int, default=16)
    sp.add_argument("--lr", type=float, default=1e-3)
    sp.add_argument("--optimizer", choices=("adam", "momentum"), default="adam")
    sp.add_argument("--val-every", type=int, default=250)
    sp.add_argument("--checkpoint-every", type=int, default=0)
    sp.add_argument("--split-seed", type=int, default=0)
    sp.add_argument("--n-val", type=int, default=100)
    sp.add_argument("--n-test", type=int, default=100)
    sp.add_argument("--resume", metavar="CKPT")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("synth", help="synthesize one sentence of a paragraph file")
    sp.add_argument("checkpoint")
    sp.add_argument("--paragraph", required=True, help="text file, one sentence per line")
    sp.add_argument("--index", type=int, required=True)
    sp.add_argument("--out")
    sp.add_argument("--name")
    sp.add_argument("--max-steps", type=int)
    sp.add_argument("--heatmap", action="store_true")
    sp.add_argument("--audio", action="store_true", help="also write Griffin-Lim audio")
    sp.add_argument("--griffin-lim-iters", type=int, default=32)
    sp.add_argument("--dropout-at-inference", type=_on_off, default=None, metavar="{on,off}")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("ablate", help="same sentence, different previous sentences")
    sp.add_argument("checkpoint")
    sp.add_argument("--sentence", required=True)
    sp.add_argument("--previous", nargs="+", required=True)
    sp.add_argument("--following", nargs="*")
    sp.add_argument("--out")
    sp.add_argument("--name")
    sp.add_argument("--max-steps", type=int)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("eval", help="teacher-forced loss and free-running MSE on a split")
    sp.add_argument("checkpoint")
    sp.add_argument("--data")
    sp.add_argument("--split", choices=("train", "val", "test"), default="val")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("selftest", help="attention oracle, gradient check, layout goldens, frame counts")
    sp.set_defaults(func=cmd_selftest)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(args.threads)
    try:
        return args.func(args)
    except TrainingDivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(json.dumps(exc.diagnostics, default=str), file=sys.stderr)
        return EXIT_DIVERGED
    except BackendError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except (CUError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())

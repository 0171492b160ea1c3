"""Command line front end.

Exit codes: 0 success, 1 usage errors, 2 data errors, 3 numeric errors.
Failures print exactly one JSON line to stderr. Settings resolve as
defaults < config file (flat key=value lines) < command line flags, and
every command that writes outputs drops a resolved-settings snapshot
next to them.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from typing import Optional

import torch

from .dataset_synth import (position_sweep_set, synth_lookup_pretrain,
                            synth_needle_corpus)
from .errors import DataError, NumericError, UsageError
from .evaluation import (attention_heatmap, evaluate, fraction_sweep,
                         mc_accuracy, sweep_eval, write_report_json,
                         write_sweep_csv)
from .model import (FocusLM, LoraConfig, ModelConfig, attach_lora,
                    load_checkpoint)
from .retrieval_augment import (EncoderTransportError, HttpEncoderClient,
                                augment_dataset, augmented_to_sample,
                                read_augmented_jsonl, write_augmented_jsonl)
from .training import (Ablation, TrainConfig, build_batch, grad_check,
                       train_loop)
from .text_corpus import (Vocab, build_prompt, read_jsonl, read_vocab,
                          write_jsonl, write_vocab)

ENCODER_URL_ENV = "FOCUSTUNE_ENCODER_URL"

# Every tunable setting, with its default. Config files and flags may only
# use these keys; unknown keys are usage errors.
CONFIG_DEFAULTS: dict = {
    "d_model": 64,
    "n_layers": 4,
    "n_heads": 4,
    "max_len": 512,
    "window": None,
    "mlp_mult": 4,
    "tie_embeddings": False,
    "use_lora": True,
    "lora_rank": 4,
    "lora_alpha": 8.0,
    "dtype": "float32",
    "tau_init": 0.07,
    "model_seed": 0,
    "steps": 100,
    "batch_size": 8,
    "lr": 2e-5,
    "beta1": 0.9,
    "beta2": 0.999,
    "eps": 1e-8,
    "weight_decay": 0.01,
    "clip_norm": 1.0,
    "warmup_frac": 0.05,
    "seed": 0,
    "log_every": 1,
    "ablation": "full",
    "max_new_tokens": 8,
}

_OPTIONAL_FLOAT_KEYS = ("clip_norm",)
_OPTIONAL_INT_KEYS = ("window",)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _coerce(key: str, raw) -> object:
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    if key in _OPTIONAL_INT_KEYS or key in _OPTIONAL_FLOAT_KEYS:
        if text.lower() in ("none", ""):
            return None
        caster = int if key in _OPTIONAL_INT_KEYS else float
        try:
            return caster(text)
        except ValueError:
            raise UsageError(f"config key {key}: cannot parse {raw!r}") from None
    default = CONFIG_DEFAULTS[key]
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise UsageError(f"config key {key}: cannot parse {raw!r}") from None
    return text


def load_config_file(path: str) -> dict:
    """Flat key=value lines; # starts a comment; unknown keys are rejected."""
    cfg = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from None
    for line_no, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{line_no}: expected key=value, got {line!r}")
        key, val = line.split("=", 1)
        key = key.strip()
        if key not in CONFIG_DEFAULTS:
            raise UsageError(f"{path}:{line_no}: unknown config key {key!r}")
        cfg[key] = _coerce(key, val)
    return cfg


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = dict(CONFIG_DEFAULTS)
    if getattr(args, "config", None):
        cfg.update(load_config_file(args.config))
    for key in CONFIG_DEFAULTS:
        flag = getattr(args, key, None)
        if flag is not None:
            cfg[key] = _coerce(key, flag)
    return cfg


def write_snapshot(settings: dict, path: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for key in sorted(settings):
            val = settings[key]
            fh.write(f"{key}={'none' if val is None else val}\n")


def _build_model(cfg: dict, vocab_size: int) -> FocusLM:
    lora = None
    if cfg["use_lora"]:
        lora = LoraConfig(rank=cfg["lora_rank"], alpha=cfg["lora_alpha"])
    try:
        mc = ModelConfig(vocab_size=vocab_size, d_model=cfg["d_model"],
                         n_layers=cfg["n_layers"], n_heads=cfg["n_heads"],
                         max_len=cfg["max_len"], window=cfg["window"], lora=lora,
                         seed=cfg["model_seed"], dtype=cfg["dtype"],
                         tau_init=cfg["tau_init"], mlp_mult=cfg["mlp_mult"],
                         tie_embeddings=cfg["tie_embeddings"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return FocusLM(mc)


def _encoder(args) -> Optional[HttpEncoderClient]:
    url = getattr(args, "encoder_url", None) or os.environ.get(ENCODER_URL_ENV)
    return HttpEncoderClient(url) if url else None


def _parse_int_list(text: str, flag: str) -> list[int]:
    try:
        vals = [int(t) for t in text.split(",") if t.strip() != ""]
    except ValueError:
        raise UsageError(f"{flag}: expected comma-separated ints, got {text!r}") from None
    if not vals:
        raise UsageError(f"{flag}: empty list")
    return vals


def _emit(obj: dict) -> None:
    print(json.dumps(obj))


# ---------------------------------------------------------------- commands


def _do_synth(out_dir: str, n_samples: int, doc_counts: list[int],
              vocab_size: int, seed: int, test_fraction: float,
              pretrain_samples: int = 0):
    os.makedirs(out_dir, exist_ok=True)
    counts = doc_counts if len(doc_counts) > 1 else doc_counts[0]
    train, test = synth_needle_corpus(n_samples, counts, vocab_size, seed=seed,
                                      test_fraction=test_fraction)
    prompts = [build_prompt(s, with_answer=True) for s in train + test]
    if pretrain_samples > 0:
        pretrain = synth_lookup_pretrain(pretrain_samples, vocab_size, seed=seed,
                                         max_docs=max(doc_counts))
        # one shared vocabulary; the base and the fine-tuned variants must
        # agree on every token id
        prompts += [build_prompt(s, with_answer=True) for s in pretrain]
        write_jsonl(pretrain, os.path.join(out_dir, "pretrain.jsonl"))
    vocab = Vocab.build(prompts)
    write_jsonl(train, os.path.join(out_dir, "train.jsonl"))
    write_jsonl(test, os.path.join(out_dir, "test.jsonl"))
    write_vocab(vocab, os.path.join(out_dir, "vocab.json"))
    return train, test, vocab


def cmd_synth(args) -> int:
    doc_counts = _parse_int_list(args.doc_counts, "--doc-counts")
    train, test, vocab = _do_synth(args.out, args.n_samples, doc_counts,
                                   args.vocab_size, args.seed, args.test_fraction,
                                   pretrain_samples=args.pretrain_samples)
    write_snapshot({"n_samples": args.n_samples, "doc_counts": args.doc_counts,
                    "vocab_size": args.vocab_size, "seed": args.seed,
                    "test_fraction": args.test_fraction,
                    "pretrain_samples": args.pretrain_samples},
                   os.path.join(args.out, "synth.resolved.txt"))
    _emit({"train": len(train), "test": len(test), "vocab": vocab.size,
           "out": args.out})
    return 0


def cmd_augment(args) -> int:
    samples = read_jsonl(args.data)
    pairs = augment_dataset(samples, chunker=args.chunker, query_mode=args.query_mode,
                            k=args.k, embedder=_encoder(args), size=args.size,
                            overlap=args.overlap, masked=not args.no_mask)
    write_augmented_jsonl(pairs, args.out, args.query_mode)
    write_snapshot({"data": args.data, "chunker": args.chunker,
                    "query_mode": args.query_mode, "k": args.k, "size": args.size,
                    "overlap": args.overlap, "masked": not args.no_mask,
                    "encoder_url": getattr(args, "encoder_url", None)
                    or os.environ.get(ENCODER_URL_ENV)},
                   args.out + ".resolved.txt")
    _emit({"pairs": len(pairs), "out": args.out})
    return 0


def _train_once(cfg: dict, pairs, vocab: Vocab, out_dir: str,
                init_from: Optional[str] = None):
    try:
        ablation = Ablation.parse(cfg["ablation"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if init_from:
        model = load_checkpoint(init_from)
        if model.config.vocab_size != vocab.size:
            raise DataError(f"checkpoint {init_from} was trained with vocab size "
                            f"{model.config.vocab_size}, vocab file has {vocab.size}")
        torch.manual_seed(cfg["seed"])
        if cfg["use_lora"]:
            model = attach_lora(model, LoraConfig(rank=cfg["lora_rank"],
                                                  alpha=cfg["lora_alpha"]))
    else:
        model = _build_model(cfg, vocab.size)
    tc = TrainConfig(steps=cfg["steps"], batch_size=cfg["batch_size"], lr=cfg["lr"],
                     betas=(cfg["beta1"], cfg["beta2"]), eps=cfg["eps"],
                     weight_decay=cfg["weight_decay"], clip_norm=cfg["clip_norm"],
                     warmup_frac=cfg["warmup_frac"], seed=cfg["seed"],
                     log_every=cfg["log_every"], ablation=ablation)
    return train_loop(model, pairs, vocab, tc, out_dir)


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    vocab = read_vocab(args.vocab)
    if args.plain:
        pairs = [(s, None) for s in read_jsonl(args.data)]
    else:
        pairs = [(orig, augmented_to_sample(aug))
                 for orig, aug in read_augmented_jsonl(args.data)]
    result = _train_once(cfg, pairs, vocab, args.out, init_from=args.init_from)
    write_snapshot({**cfg, "data": args.data, "vocab": args.vocab, "out": args.out,
                    "init_from": args.init_from, "plain": args.plain},
                   os.path.join(args.out, "config.resolved.txt"))
    _emit({"steps": result.steps, "final_loss": result.final_loss,
           "best_loss": result.best_loss, "best_step": result.best_step,
           "final": result.final_path, "best": result.best_path,
           "elapsed_s": round(result.elapsed_s, 3)})
    return 0


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    vocab = read_vocab(args.vocab)
    samples = read_jsonl(args.data)
    model = load_checkpoint(args.ckpt)
    report = evaluate(model, samples, vocab, mode=args.mode,
                      embedder=_encoder(args),
                      max_new_tokens=cfg["max_new_tokens"])
    summary = {"mode": report.mode, "n": report.n, "em": report.em, "f1": report.f1}
    if args.mc:
        summary["mc"] = mc_accuracy(model, samples, vocab)
    if args.out:
        write_report_json(report, args.out)
        write_snapshot({**cfg, "data": args.data, "vocab": args.vocab,
                        "ckpt": args.ckpt, "mode": args.mode},
                       args.out + ".resolved.txt")
    _emit(summary)
    return 0


def _sweep_base(samples, doc_counts):
    max_docs = max(doc_counts)
    base = [s for s in samples if len(s.documents) >= max_docs]
    if not base:
        raise DataError(f"no samples carry >= {max_docs} documents for the sweep")
    return base


def _sweep_grids(samples, doc_counts, positions, seed):
    if min(positions) < 0 or max(positions) >= min(doc_counts):
        raise UsageError(f"positions must lie in [0, {min(doc_counts) - 1}] "
                         f"for doc counts {doc_counts}")
    base = _sweep_base(samples, doc_counts)
    return {n: position_sweep_set(base, n, positions, seed=seed) for n in doc_counts}


def _parse_positions(text: str) -> tuple[str, list]:
    """Either absolute indices ("0,1,2") or depth fractions; "last" and any
    token with a decimal point select fraction mode ("0,0.25,0.5,last")."""
    tokens = [t.strip() for t in text.split(",") if t.strip() != ""]
    if not tokens:
        raise UsageError("--positions: empty list")
    if any(t == "last" or "." in t for t in tokens):
        fracs = []
        for t in tokens:
            try:
                fracs.append(1.0 if t == "last" else float(t))
            except ValueError:
                raise UsageError(f"--positions: cannot parse {t!r}") from None
            if not 0.0 <= fracs[-1] <= 1.0:
                raise UsageError(f"--positions: fraction {t} outside [0, 1]")
        return "fraction", fracs
    return "absolute", _parse_int_list(text, "--positions")


def cmd_sweep(args) -> int:
    cfg = resolve_config(args)
    vocab = read_vocab(args.vocab)
    samples = read_jsonl(args.data)
    if args.limit:
        samples = samples[: args.limit]
    doc_counts = _parse_int_list(args.doc_counts, "--doc-counts")
    kind, positions = _parse_positions(args.positions)
    model = load_checkpoint(args.ckpt)
    if kind == "fraction":
        seeds = _parse_int_list(args.seeds, "--seeds")
        report = fraction_sweep(model, vocab, _sweep_base(samples, doc_counts),
                                doc_counts, positions, seeds, mode=args.mode,
                                embedder=_encoder(args),
                                max_new_tokens=cfg["max_new_tokens"])
    else:
        grids = _sweep_grids(samples, doc_counts, positions, cfg["seed"])
        report = sweep_eval(model, vocab, grids, mode=args.mode,
                            embedder=_encoder(args),
                            max_new_tokens=cfg["max_new_tokens"])
    os.makedirs(args.out, exist_ok=True)
    write_sweep_csv(report, os.path.join(args.out, "sweep_em.csv"), metric="em")
    write_sweep_csv(report, os.path.join(args.out, "sweep_f1.csv"), metric="f1")
    write_report_json(report, os.path.join(args.out, "sweep.json"))
    write_snapshot({**cfg, "data": args.data, "ckpt": args.ckpt, "mode": args.mode,
                    "doc_counts": args.doc_counts, "positions": args.positions},
                   os.path.join(args.out, "sweep.resolved.txt"))
    _emit({"mode": report.mode, "positions": report.positions,
           "doc_counts": report.doc_counts, "em": report.em})
    return 0


def cmd_attn(args) -> int:
    vocab = read_vocab(args.vocab)
    samples = read_jsonl(args.data)
    if args.limit:
        samples = samples[: args.limit]
    model = load_checkpoint(args.ckpt)
    per_sample = []
    hits = scored = 0
    row_sums = []
    for sample in samples:
        res = attention_heatmap(model, sample, vocab, layer=args.layer)
        top = max(range(len(res.weights)), key=lambda i: (res.weights[i], -i))
        rec = {"id": sample.id, "top_sentence": top, "gold_sentence": res.gold_index,
               "weights": res.weights, "row_sum": res.row_sum}
        per_sample.append(rec)
        row_sums.append(res.row_sum)
        if res.gold_index is not None:
            scored += 1
            hits += int(top == res.gold_index)
    if scored == 0:
        raise DataError("no sample had identifiable gold evidence")
    summary = {"n": len(samples), "scored": scored, "gold_max_rate": hits / scored,
               "row_sum_min": min(row_sums), "row_sum_max": max(row_sums)}
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump({**summary, "per_sample": per_sample}, fh, indent=2)
            fh.write("\n")
        write_snapshot({"data": args.data, "ckpt": args.ckpt,
                        "layer": args.layer, "limit": args.limit},
                       args.out + ".resolved.txt")
    _emit(summary)
    return 0


def cmd_gradcheck(args) -> int:
    train, test = synth_needle_corpus(8, 2, 24, seed=args.seed)
    vocab = Vocab.build([build_prompt(s, with_answer=True) for s in train + test])
    pairs = augment_dataset(train[:4], chunker="sentence",
                            query_mode="gold_evidence")
    batch = build_batch([(o, augmented_to_sample(a)) for o, a in pairs], vocab)
    window = _coerce("window", args.window) if args.window is not None else None
    mc = ModelConfig(vocab_size=vocab.size, d_model=16, n_layers=2, n_heads=2,
                     max_len=128, window=window, lora=LoraConfig(rank=2, alpha=4.0),
                     seed=args.seed, dtype="float64")
    try:
        ablation = Ablation.parse(args.ablation)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    report = grad_check(FocusLM(mc), batch, ablation, n_coords=args.n_coords,
                        tol=args.tol, seed=args.seed)
    _emit(report.to_dict())
    if not report.passed:
        raise NumericError(f"gradient check failed: max_rel_err={report.max_rel_err:.3e} "
                           f"at {report.worst_param}[{report.worst_index}]")
    return 0


PIPELINE_VARIANTS = (("full", "full"), ("no_contra", "-contra"),
                     ("no_masking", "-masking"), ("no_da", "-da"))

# Desk-scale fine-tuning recipe: every variant adapts the same pretrained
# base. Full-parameter updates: with the embeddings tied to the output head,
# adapter-only tuning can only fit the data by warping embedding geometry,
# which wrecks held-out lookup. Config files and flags still win.
PIPELINE_RECIPE = {"steps": 600, "lr": 3e-4, "batch_size": 8, "n_layers": 2,
                   "max_len": 256, "mlp_mult": 0, "tie_embeddings": True,
                   "model_seed": 3, "log_every": 100, "use_lora": False}

# The base is trained full-parameter on the lookup mixture; adapters would
# be far too small to learn the circuit from scratch.
PRETRAIN_RECIPE = {"ablation": "none", "batch_size": 32, "lr": 1e-3,
                   "use_lora": False, "log_every": 500}


def _parse_variants(text: str) -> list[tuple[str, str]]:
    known = dict(PIPELINE_VARIANTS)
    tags = [t.strip() for t in text.split(",") if t.strip() != ""]
    if not tags:
        raise UsageError("--variants: empty list")
    for t in tags:
        if t not in known:
            raise UsageError(f"--variants: unknown variant {t!r}; allowed: "
                             f"{', '.join(known)}")
    seen = list(dict.fromkeys(tags))
    return [(t, known[t]) for t in seen]


def cmd_pipeline(args) -> int:
    cfg = dict(CONFIG_DEFAULTS)
    cfg.update(PIPELINE_RECIPE)
    if args.config:
        cfg.update(load_config_file(args.config))
    for key in CONFIG_DEFAULTS:
        flag = getattr(args, key, None)
        if flag is not None:
            cfg[key] = _coerce(key, flag)

    seeds = _parse_int_list(args.seeds, "--seeds")
    variants = _parse_variants(args.variants)

    out = args.out
    data_dir = os.path.join(out, "data")
    aug_dir = os.path.join(out, "aug")
    runs_dir = os.path.join(out, "runs")
    eval_dir = os.path.join(out, "eval")
    for d in (out, aug_dir, runs_dir, eval_dir):
        os.makedirs(d, exist_ok=True)

    timings: dict[str, float] = {}

    def stage(name: str, outputs: list[str], build) -> None:
        if not args.force and outputs and all(os.path.exists(p) for p in outputs):
            print(f"stage {name}: cached")
            return
        t0 = time.perf_counter()
        build()
        timings[name] = round(time.perf_counter() - t0, 3)
        print(f"stage {name}: built ({timings[name]:.1f}s)")

    doc_counts = _parse_int_list(args.doc_counts, "--doc-counts")
    train_path = os.path.join(data_dir, "train.jsonl")
    test_path = os.path.join(data_dir, "test.jsonl")
    vocab_path = os.path.join(data_dir, "vocab.json")
    pretrain_path = os.path.join(data_dir, "pretrain.jsonl")
    synth_outputs = [train_path, test_path, vocab_path]
    if args.pretrain_samples > 0:
        synth_outputs.append(pretrain_path)
    stage("synth", synth_outputs,
          lambda: _do_synth(data_dir, args.n_samples, doc_counts, args.vocab_size,
                            cfg["seed"], args.test_fraction,
                            pretrain_samples=args.pretrain_samples))
    vocab = read_vocab(vocab_path)
    train_samples = read_jsonl(train_path)
    test_samples = read_jsonl(test_path)

    masked_path = os.path.join(aug_dir, "train_masked.jsonl")
    unmasked_path = os.path.join(aug_dir, "train_unmasked.jsonl")

    def build_aug():
        enc = _encoder(args)
        for path, masked in ((masked_path, True), (unmasked_path, False)):
            pairs = augment_dataset(train_samples, chunker="sentence",
                                    query_mode=args.query_mode, k=args.k,
                                    embedder=enc, masked=masked)
            write_augmented_jsonl(pairs, path, args.query_mode)

    stage("augment", [masked_path, unmasked_path], build_aug)

    base_dir = os.path.join(out, "base")
    base_ckpt = os.path.join(base_dir, "final.ckpt")

    def build_base():
        pairs = [(s, None) for s in read_jsonl(pretrain_path)]
        base_cfg = {**cfg, **PRETRAIN_RECIPE, "steps": args.pretrain_steps}
        _train_once(base_cfg, pairs, vocab, base_dir)
        write_snapshot({**base_cfg, "data": pretrain_path, "vocab": vocab_path},
                       os.path.join(base_dir, "config.resolved.txt"))

    stage("pretrain", [base_ckpt], build_base)

    ckpts: dict[tuple[str, int], str] = {}
    for tag, ablation in variants:
        data_path = unmasked_path if ablation == "-masking" else masked_path
        for seed in seeds:
            run_dir = os.path.join(runs_dir, tag, f"s{seed}")
            ckpt = os.path.join(run_dir, "final.ckpt")

            def build_run(run_dir=run_dir, ablation=ablation,
                          data_path=data_path, seed=seed):
                pairs = [(o, augmented_to_sample(a))
                         for o, a in read_augmented_jsonl(data_path)]
                run_cfg = {**cfg, "ablation": ablation, "seed": seed}
                _train_once(run_cfg, pairs, vocab, run_dir, init_from=base_ckpt)
                write_snapshot({**run_cfg, "data": data_path, "vocab": vocab_path,
                                "init_from": base_ckpt},
                               os.path.join(run_dir, "config.resolved.txt"))

            stage(f"train[{tag}/s{seed}]", [ckpt], build_run)
            ckpts[(tag, seed)] = ckpt

    n_docs_of = {s.id: len(s.documents) for s in test_samples}

    def build_eval_run(tag, seed, path):
        model = load_checkpoint(ckpts[(tag, seed)])
        entry = {}
        modes = ("plain", "retrieval", "rerank") if tag == "full" else ("plain",)
        for mode in modes:
            rep = evaluate(model, test_samples, vocab, mode=mode,
                           max_new_tokens=cfg["max_new_tokens"])
            by_docs: dict[int, list] = {}
            for p in rep.predictions:
                by_docs.setdefault(n_docs_of[p["id"]], []).append(p["em"])
            entry[mode] = {"em": rep.em, "f1": rep.f1, "n": rep.n,
                           "em_by_docs": {str(k): sum(v) / len(v)
                                          for k, v in sorted(by_docs.items())}}
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(entry, fh, indent=2)
            fh.write("\n")

    eval_paths = {}
    for tag, _ in variants:
        for seed in seeds:
            path = os.path.join(eval_dir, f"{tag}_s{seed}.json")
            stage(f"eval[{tag}/s{seed}]", [path],
                  lambda tag=tag, seed=seed, path=path: build_eval_run(tag, seed, path))
            eval_paths[(tag, seed)] = path

    # aggregation is cheap; rebuilt on every invocation so the report always
    # reflects the variant set that was asked for
    table = {}
    for tag, _ in variants:
        per_seed = []
        for seed in seeds:
            with open(eval_paths[(tag, seed)], "r", encoding="utf-8") as fh:
                per_seed.append(json.load(fh))
        entry = {}
        for mode in per_seed[0]:
            ems = [ps[mode]["em"] for ps in per_seed]
            f1s = [ps[mode]["f1"] for ps in per_seed]
            counts = sorted({k for ps in per_seed for k in ps[mode]["em_by_docs"]},
                            key=int)
            entry[mode] = {
                "em": sum(ems) / len(ems),
                "f1": sum(f1s) / len(f1s),
                "n": per_seed[0][mode]["n"],
                "per_seed_em": ems,
                "em_by_docs": {c: sum(ps[mode]["em_by_docs"][c] for ps in per_seed)
                               / len(per_seed) for c in counts},
            }
        table[tag] = entry
    report_path = os.path.join(eval_dir, "report.json")
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump({"seeds": seeds, "variants": table}, fh, indent=2)
        fh.write("\n")

    have = dict(variants)
    if "full" in have:
        full_ckpt = ckpts[("full", seeds[0])]
        sweep_dir = os.path.join(out, "sweep")
        sweep_json = os.path.join(sweep_dir, "sweep.json")

        def build_sweep():
            os.makedirs(sweep_dir, exist_ok=True)
            kind, positions = _parse_positions(args.positions)
            base = _sweep_base(test_samples, doc_counts)[: args.sweep_samples]
            model = load_checkpoint(full_ckpt)
            if kind == "fraction":
                rep = fraction_sweep(model, vocab, base, doc_counts, positions,
                                     seeds, mode="plain",
                                     max_new_tokens=cfg["max_new_tokens"])
            else:
                grids = _sweep_grids(base, doc_counts, positions, cfg["seed"])
                rep = sweep_eval(model, vocab, grids, mode="plain",
                                 max_new_tokens=cfg["max_new_tokens"])
            write_sweep_csv(rep, os.path.join(sweep_dir, "sweep_em.csv"), metric="em")
            write_sweep_csv(rep, os.path.join(sweep_dir, "sweep_f1.csv"), metric="f1")
            write_report_json(rep, sweep_json)

        stage("sweep", [sweep_json], build_sweep)

        attn_path = os.path.join(out, "attn", "report.json")

        def build_attn():
            os.makedirs(os.path.dirname(attn_path), exist_ok=True)
            model = load_checkpoint(full_ckpt)
            hits = scored = 0
            rows = []
            for sample in test_samples:
                res = attention_heatmap(model, sample, vocab)
                top = max(range(len(res.weights)), key=lambda i: (res.weights[i], -i))
                if res.gold_index is not None:
                    scored += 1
                    hits += int(top == res.gold_index)
                rows.append({"id": sample.id, "top": top, "gold": res.gold_index,
                             "row_sum": res.row_sum})
            with open(attn_path, "w", encoding="utf-8") as fh:
                json.dump({"scored": scored,
                           "gold_max_rate": hits / scored if scored else 0.0,
                           "per_sample": rows}, fh, indent=2)
                fh.write("\n")

        stage("attn", [attn_path], build_attn)

    write_snapshot({**cfg, "n_samples": args.n_samples, "doc_counts": args.doc_counts,
                    "vocab_size": args.vocab_size, "query_mode": args.query_mode,
                    "k": args.k, "positions": args.positions, "seeds": args.seeds,
                    "variants": args.variants,
                    "pretrain_samples": args.pretrain_samples,
                    "pretrain_steps": args.pretrain_steps,
                    "sweep_samples": args.sweep_samples},
                   os.path.join(out, "pipeline.resolved.txt"))

    summary = {"seeds": seeds,
               "variants": {tag: table[tag]["plain"]["em"] for tag, _ in variants}}
    if "full" in have:
        summary["full_em"] = table["full"]["plain"]["em"]
        summary["rerank_em"] = table["full"]["rerank"]["em"]
        summary["rerank_minus_plain"] = summary["rerank_em"] - summary["full_em"]
    if "no_da" in have:
        summary["vanilla_em"] = table["no_da"]["plain"]["em"]
    if "full" in have and "no_da" in have:
        summary["full_minus_vanilla"] = summary["full_em"] - summary["vanilla_em"]
    if "no_contra" in have:
        summary["no_contra_em"] = table["no_contra"]["plain"]["em"]
    if "no_masking" in have:
        summary["no_masking_em"] = table["no_masking"]["plain"]["em"]
    summary_path = os.path.join(out, "summary.json")
    with open(summary_path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    _emit({**summary, "stage_seconds": timings})
    return 0


# ---------------------------------------------------------------- parser


def _add_config_flags(p: _Parser) -> None:
    p.add_argument("--config", default=None, help="flat key=value settings file")
    for key in CONFIG_DEFAULTS:
        p.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None,
                       metavar="V", help=argparse.SUPPRESS)


def build_parser() -> _Parser:
    parser = _Parser(prog="focustune",
                     description="retrieval-masked augmentation and focus "
                                 "fine-tuning for a toy causal LM")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate the synthetic needle corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n-samples", type=int, default=96)
    p.add_argument("--doc-counts", default="4,8,16")
    p.add_argument("--vocab-size", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--test-fraction", type=float, default=0.25)
    p.add_argument("--pretrain-samples", type=int, default=0,
                   help="also emit a lookup-mixture corpus of this size")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("augment", help="build retrieval-masked twins of a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--chunker", choices=("sentence", "fixed"), default="sentence")
    p.add_argument("--query-mode", choices=("question", "answer", "gold_evidence"),
                   default="question")
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--size", type=int, default=500)
    p.add_argument("--overlap", type=int, default=50)
    p.add_argument("--no-mask", action="store_true",
                   help="concatenate selected chunks without mask tokens")
    p.add_argument("--encoder-url", default=None,
                   help=f"external encoder endpoint (or ${ENCODER_URL_ENV})")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train", help="fine-tune on (original, augmented) pairs")
    p.add_argument("--data", required=True, help="augmented jsonl")
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--init-from", default=None,
                   help="start from this checkpoint instead of fresh weights")
    p.add_argument("--plain", action="store_true",
                   help="treat --data as raw samples and train plain CLM")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="greedy-decode answers and score EM/F1")
    p.add_argument("--data", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--mode", choices=("plain", "retrieval", "rerank"),
                   default="plain")
    p.add_argument("--mc", action="store_true",
                   help="also score multiple-choice accuracy (needs options)")
    p.add_argument("--out", default=None, help="write the full report JSON here")
    p.add_argument("--encoder-url", default=None)
    _add_config_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="EM grid over gold positions x doc counts")
    p.add_argument("--data", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("plain", "retrieval", "rerank"),
                   default="plain")
    p.add_argument("--doc-counts", default="4,8,16")
    p.add_argument("--positions", default="0,0.25,0.5,0.75,last",
                   help="absolute indices, or depth fractions with 'last'")
    p.add_argument("--seeds", default="0,1,2",
                   help="distractor-draw seeds averaged per cell (fraction mode)")
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--encoder-url", default=None)
    _add_config_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("attn", help="sentence-level attention from the last prompt token")
    p.add_argument("--data", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--layer", type=int, default=None,
                   help="attention layer index; default averages all layers")
    p.add_argument("--limit", type=int, default=None)
    p.set_defaults(func=cmd_attn)

    p = sub.add_parser("gradcheck", help="autograd vs central finite differences")
    p.add_argument("--n-coords", type=int, default=200)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--window", default=None)
    p.add_argument("--ablation", default="full")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("pipeline", help="synth, augment, pretrain, ablation "
                                        "study, eval, sweep")
    p.add_argument("--out", required=True)
    p.add_argument("--n-samples", type=int, default=192)
    p.add_argument("--doc-counts", default="4,8,16")
    p.add_argument("--vocab-size", type=int, default=256)
    p.add_argument("--test-fraction", type=float, default=0.5)
    p.add_argument("--pretrain-samples", type=int, default=32768)
    p.add_argument("--pretrain-steps", type=int, default=11000)
    p.add_argument("--seeds", default="0,1,2",
                   help="fine-tuning seeds; metrics are averaged over them")
    p.add_argument("--variants", default="full,no_contra,no_masking,no_da")
    p.add_argument("--query-mode", choices=("question", "answer", "gold_evidence"),
                   default="question")
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--positions", default="0,0.25,0.5,0.75,last")
    p.add_argument("--sweep-samples", type=int, default=8,
                   help="base questions replanted per sweep cell")
    p.add_argument("--encoder-url", default=None)
    p.add_argument("--force", action="store_true", help="rebuild cached stages")
    _add_config_flags(p)
    p.set_defaults(func=cmd_pipeline)

    return parser


def _preprocess_argv(argv: list[str]) -> list[str]:
    """Glue ablation switch values to their flag so argparse does not read
    "-contra" as an unknown option."""
    out = []
    i = 0
    while i < len(argv):
        tok = argv[i]
        if tok == "--ablation" and i + 1 < len(argv) and argv[i + 1].startswith("-"):
            out.append(f"--ablation={argv[i + 1]}")
            i += 2
            continue
        out.append(tok)
        i += 1
    return out


def main(argv: Optional[list[str]] = None) -> int:
    if argv is None:
        argv = sys.argv[1:]
    try:
        parser = build_parser()
        args = parser.parse_args(_preprocess_argv(list(argv)))
        if not getattr(args, "command", None):
            raise UsageError("no command given; see --help")
        return args.func(args)
    except UsageError as exc:
        print(json.dumps({"error": "usage", "message": str(exc)}), file=sys.stderr)
        return 1
    except NumericError as exc:
        print(json.dumps({"error": "numeric", "message": str(exc)}), file=sys.stderr)
        return 3
    except (DataError, EncoderTransportError, ValueError, OSError,
            KeyError) as exc:
        print(json.dumps({"error": "data", "message": str(exc)}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Command-line front end: preprocess, rank, sweep-heads, sweep-embeddings, classify, stats.

Settings come from built-in defaults, then an optional TOML file
(``--config``), then command-line flags. ``--set section.key=value`` reaches
any setting. Every output records the package version, the seed and a hash
of the effective configuration.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .evaluation import encode_transcripts, mean_log_ppl, paired_scores, roc_auc, scores_csv
from .importance import FineTuneHyper, HeadRanking, fine_tune_rank
from .masking import bidirectional_selection, embedding_selection, sweep_schedule
from .model import PRESETS, ModelConfig, load_weights, read_container
from .stats import dunn_test, fit_exponential, fit_linear
from .tokenizer import byte_level_vocab, load_vocab
from .transcripts import CleanRuleSet, load_corpus, read_jsonl, write_jsonl

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

logger = logging.getLogger("neural_reserve")

THREADS_ENV = "NEURAL_RESERVE_THREADS"

DEFAULTS = {
    "seed": 42,
    "output_dir": "out",
    "model": {
        "preset": "auto",
        "weights": None,
        "dementia_weights": None,
        "dtype": "float32",
        "mask_mode": "tied",
    },
    "tokenizer": {"vocab": None, "merges": None, "byte_level": False, "prepend_eos": False},
    "corpus": {"train": None, "eval": None, "test": None},
    "preprocess": {
        "input_dir": None,
        "manifest": None,
        "output": "transcripts.jsonl",
        "corpus": "",
        "participant": "PAR",
        "splits": [],
    },
    "finetune": {
        "lr": 5e-5,
        "epochs": 3,
        "accumulation": 8,
        "max_length": 1024,
        "weight_decay": 0.01,
        "norm": "l1",
        "normalize": "none",
    },
    "sweep": {"step": 1, "max_pct": 100, "ranking": None},
    "classify": {"kind": "heads", "pct": None, "best_from": None},
    "stats": {"sweeps": [], "names": [], "adjustment": "bonferroni", "column": "mean_log_ppl"},
}

# Settings that change where files go, not what is in them.
_UNHASHED = {("output_dir",)}


class ConfigError(ValueError):
    pass


# configuration -------------------------------------------------------------


def _merge(base: dict, override: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown setting {where}{key!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"setting {where}{key!r} must be a table")
            out[key] = _merge(base[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def _parse_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def _assign(cfg: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = cfg
    for part in parts[:-1]:
        if not isinstance(node.get(part), dict):
            raise ConfigError(f"unknown setting {dotted!r}")
        node = node[part]
    if parts[-1] not in node or isinstance(node[parts[-1]], dict):
        raise ConfigError(f"unknown setting {dotted!r}")
    node[parts[-1]] = value


def resolve_config(args) -> dict:
    """Defaults < TOML file < command-line flags."""
    cfg = copy.deepcopy(DEFAULTS)
    base_dir = Path.cwd()
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        with open(path, "rb") as fh:
            cfg = _merge(cfg, tomllib.load(fh))
        base_dir = path.parent
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        _assign(cfg, key.strip(), _parse_value(value.strip()))
    for dotted, value in getattr(args, "overrides", {}).items():
        if value is not None:
            _assign(cfg, dotted, value)
    cfg["_base_dir"] = str(base_dir)
    return cfg


def config_hash(cfg: dict) -> str:
    clean = {k: v for k, v in cfg.items() if not k.startswith("_") and (k,) not in _UNHASHED}
    blob = json.dumps(clean, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def provenance(cfg: dict, command: str) -> dict:
    return {"command": command, "config_hash": config_hash(cfg), "seed": cfg["seed"],
            "version": __version__}


def _header_lines(prov: dict) -> list:
    return [f"neural_reserve {prov['version']} command={prov['command']} "
            f"config_hash={prov['config_hash']} seed={prov['seed']}"]


def _path(cfg: dict, value, what: str, must_exist: bool = True) -> Path:
    if value in (None, ""):
        raise ConfigError(f"missing setting: {what}")
    path = Path(value)
    if not path.is_absolute():
        path = Path(cfg["_base_dir"]) / path
    if must_exist and not path.exists():
        raise FileNotFoundError(f"{what}: {path} does not exist")
    return path


def _out_dir(cfg: dict) -> Path:
    out = _path(cfg, cfg["output_dir"], "output_dir", must_exist=False)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    logger.info("wrote %s", path)


def _json_safe(obj):
    # Strict JSON has no infinities; thresholds at the ends of the ROC are written as strings.
    if isinstance(obj, float) and not math.isfinite(obj):
        return "nan" if math.isnan(obj) else ("inf" if obj > 0 else "-inf")
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


def _dump_json(obj) -> str:
    return json.dumps(_json_safe(obj), indent=1, sort_keys=True, allow_nan=False) + "\n"


# resources -------------------------------------------------------------------


def _model_config(cfg: dict, weights: Path) -> ModelConfig:
    preset = cfg["model"]["preset"]
    if preset != "auto":
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)} or 'auto'")
        return PRESETS[preset]
    arrays, meta = read_container(weights)
    keys = ("n_layer", "n_head", "d_model", "d_vocab", "context_length", "layer_norm_eps")
    if all(k in meta for k in keys[:5]):
        return ModelConfig.from_dict({k: float(meta[k]) if k == "layer_norm_eps" else int(meta[k])
                                      for k in keys if k in meta})
    names = [n.removeprefix("transformer.") for n in arrays]
    n_layer = len({n.split(".")[1] for n in names if n.startswith("h.")})
    d_model = arrays[next(n for n in arrays if n.endswith("wte.weight"))].shape[1]
    for candidate in PRESETS.values():
        if candidate.n_layer == n_layer and candidate.d_model == d_model:
            return candidate
    raise ConfigError("cannot infer the model shape from the weights; set model.preset")


def _load_model(cfg: dict, key: str = "weights"):
    path = _path(cfg, cfg["model"][key], f"model.{key}")
    config = _model_config(cfg, path)
    dtype = {"float32": np.float32, "float64": np.float64}.get(cfg["model"]["dtype"])
    if dtype is None:
        raise ConfigError("model.dtype must be float32 or float64")
    return load_weights(path, config, dtype=dtype, mask_mode=cfg["model"]["mask_mode"])


def _models(cfg: dict):
    control = _load_model(cfg)
    if cfg["model"]["dementia_weights"]:
        return control, _load_model(cfg, "dementia_weights")
    return control, control


def _vocab(cfg: dict):
    tok = cfg["tokenizer"]
    if tok["byte_level"]:
        return byte_level_vocab()
    return load_vocab(_path(cfg, tok["vocab"], "tokenizer.vocab"),
                      _path(cfg, tok["merges"], "tokenizer.merges"))


def _prepend(cfg: dict, vocab):
    if not cfg["tokenizer"]["prepend_eos"]:
        return None
    if vocab.eos_id is None:
        raise ConfigError("tokenizer.prepend_eos is set but the vocabulary has no end-of-text token")
    return vocab.eos_id


def _texts(cfg: dict, key: str, vocab, required: bool = True):
    value = cfg["corpus"][key]
    if not value and not required:
        return None
    transcripts = read_jsonl(_path(cfg, value, f"corpus.{key}"))
    if not transcripts:
        raise ValueError(f"corpus.{key} is empty")
    return encode_transcripts(transcripts, vocab)


def _ranking(cfg: dict) -> HeadRanking:
    path = _path(cfg, cfg["sweep"]["ranking"], "sweep.ranking")
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".csv":
        return HeadRanking.from_grid_csv(text)
    return HeadRanking.from_json(text)


def _labelled(texts) -> bool:
    labels = {t.label for t in texts}
    return {"control", "dementia"} <= labels


# commands ----------------------------------------------------------------------


def cmd_preprocess(cfg: dict) -> dict:
    pre = cfg["preprocess"]
    input_dir = _path(cfg, pre["input_dir"], "preprocess.input_dir")
    manifest = _path(cfg, pre["manifest"], "preprocess.manifest")
    rules = CleanRuleSet(participant_tier=pre["participant"])
    splits = set(pre["splits"]) if pre["splits"] else None
    transcripts = load_corpus(input_dir, manifest, rules, corpus=pre["corpus"], splits=splits)
    if not pre["output"]:
        raise ConfigError("missing setting: preprocess.output")
    out = Path(pre["output"])
    if not out.is_absolute():
        out = _out_dir(cfg) / out
    meta = provenance(cfg, "preprocess")
    meta["rules"] = rules.to_dict()
    write_jsonl(transcripts, out, meta=meta)
    return {"output": str(out), "transcripts": len(transcripts)}


def cmd_rank(cfg: dict) -> dict:
    model, _ = _models(cfg)
    vocab = _vocab(cfg)
    train = _texts(cfg, "train", vocab)
    ft = cfg["finetune"]
    hyper = FineTuneHyper(lr=ft["lr"], epochs=ft["epochs"], accumulation=ft["accumulation"],
                          max_length=ft["max_length"], seed=cfg["seed"],
                          weight_decay=ft["weight_decay"], norm=ft["norm"],
                          normalize=ft["normalize"])
    prefix = _prepend(cfg, vocab)
    seqs = [([prefix] if prefix is not None else []) + list(t.tokens) for t in train]
    ranking = fine_tune_rank(model, seqs, hyper)
    prov = provenance(cfg, "rank")
    ranking.metadata["provenance"] = prov
    out = _out_dir(cfg)
    _write(out / "ranking.json", ranking.to_json())
    _write(out / "rank_grid.csv", ranking.grid_csv(_header_lines(prov)))
    return {"ranking": str(out / "ranking.json"), "grid": str(out / "rank_grid.csv"),
            "top_heads": [list(h) for h in ranking.order()[:5]]}


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def sweep_rows(control, dementia, specs, eval_texts, test_texts=None, prepend_id=None) -> list:
    """One row per spec: pct, masked count, mean/std log PPL and, with a labelled test set, ACC/AUC."""
    cache = {}
    rows = []
    for spec in specs:
        mean, std, _ = mean_log_ppl(dementia, spec, eval_texts, prepend_id)
        row = {"pct": spec.pct, "masked_count": spec.masked_count,
               "mean_log_ppl": mean, "std_log_ppl": std}
        if test_texts is not None:
            result = roc_auc(paired_scores(control, dementia, spec, test_texts, prepend_id, cache))
            row["acc"], row["auc"] = result.acc, result.auc
        logger.info("pct %d: masked %d, mean log PPL %.5f", spec.pct, spec.masked_count, mean)
        rows.append(row)
    return rows


def sweep_csv(rows, header_lines=()) -> str:
    cols = ["pct", "masked_count", "mean_log_ppl", "std_log_ppl"]
    if rows and "acc" in rows[0]:
        cols += ["acc", "auc"]
    buf = io.StringIO()
    for line in header_lines:
        buf.write(f"# {line}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(cols)
    for r in rows:
        writer.writerow([r["pct"], r["masked_count"]] + [_fmt(r[c]) for c in cols[2:]])
    return buf.getvalue()


def read_sweep_csv(path) -> list:
    with open(path, encoding="utf-8") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    rows = []
    for rec in csv.DictReader(lines):
        row = {"pct": int(rec["pct"]), "masked_count": int(rec["masked_count"])}
        for key in ("mean_log_ppl", "std_log_ppl", "acc", "auc"):
            if rec.get(key) not in (None, ""):
                row[key] = float(rec[key])
        rows.append(row)
    return rows


def cmd_sweep(cfg: dict, kind: str) -> dict:
    control, dementia = _models(cfg)
    vocab = _vocab(cfg)
    prefix = _prepend(cfg, vocab)
    eval_texts = _texts(cfg, "eval", vocab)
    test_texts = _texts(cfg, "test", vocab, required=False)
    if test_texts is not None and not _labelled(test_texts):
        raise ValueError("corpus.test needs both control and dementia transcripts")
    sw = cfg["sweep"]
    if kind == "heads":
        specs = sweep_schedule(_ranking(cfg), sw["step"], sw["max_pct"])
    else:
        specs = sweep_schedule(dementia.config.d_model, sw["step"], sw["max_pct"])
    rows = sweep_rows(control, dementia, specs, eval_texts, test_texts, prefix)
    name = "sweep_heads.csv" if kind == "heads" else "sweep_embeddings.csv"
    out = _out_dir(cfg) / name
    _write(out, sweep_csv(rows, _header_lines(provenance(cfg, f"sweep-{kind}"))))
    return {"output": str(out), "rows": len(rows)}


def best_pct(rows) -> int:
    """Highest ACC, then highest AUC, then the smallest mask."""
    scored = [r for r in rows if "acc" in r]
    if not scored:
        raise ValueError("sweep has no acc column; run the sweep with corpus.test set")
    return min(scored, key=lambda r: (-r["acc"], -r["auc"], r["pct"]))["pct"]


def cmd_classify(cfg: dict) -> dict:
    cl = cfg["classify"]
    if cl["kind"] not in ("heads", "embeddings"):
        raise ConfigError("classify.kind must be 'heads' or 'embeddings'")
    if cl["pct"] is None and not cl["best_from"]:
        raise ConfigError("set classify.pct or classify.best_from")
    pct_source = "classify.pct"
    if cl["pct"] is not None:
        pct = int(cl["pct"])
    else:
        pct = best_pct(read_sweep_csv(_path(cfg, cl["best_from"], "classify.best_from")))
        pct_source = "best ACC in classify.best_from"
    control, dementia = _models(cfg)
    vocab = _vocab(cfg)
    prefix = _prepend(cfg, vocab)
    test = _texts(cfg, "test", vocab)
    if cl["kind"] == "heads":
        spec = bidirectional_selection(_ranking(cfg), pct)
    else:
        spec = embedding_selection(dementia.config.d_model, pct)
    scores = paired_scores(control, dementia, spec, test, prefix)
    result = roc_auc(scores)
    prov = provenance(cfg, "classify")
    out = _out_dir(cfg)
    _write(out / "scores.csv", scores_csv(scores, _header_lines(prov)))
    report = result.to_dict()
    report.update({"pct": pct, "best_pct": pct, "pct_source": pct_source, "kind": cl["kind"],
                   "masked_count": spec.masked_count, "mask": spec.to_dict(),
                   "provenance": prov})
    _write(out / "metrics.json", _dump_json(report))
    return {"acc": result.acc, "auc": result.auc, "pct": pct}


def cmd_stats(cfg: dict) -> dict:
    st = cfg["stats"]
    paths = [_path(cfg, p, "stats.sweeps") for p in st["sweeps"]]
    if not paths:
        raise ConfigError("stats needs at least one sweep CSV")
    names = list(st["names"]) or [p.stem for p in paths]
    if len(names) != len(paths):
        raise ConfigError("stats.names must match stats.sweeps one to one")
    column = st["column"]
    fits = {}
    groups = []
    for name, path in zip(names, paths):
        rows = read_sweep_csv(path)
        x = np.array([r["pct"] / 100.0 for r in rows])
        y = np.array([r[column] for r in rows])
        groups.append(y)
        fits[name] = {"linear": fit_linear(x, y).to_dict(),
                      "exponential": fit_exponential(x, y).to_dict()}
    report = {"column": column, "fits": fits, "provenance": provenance(cfg, "stats")}
    if len(groups) >= 2:
        report["dunn"] = dunn_test(groups, st["adjustment"], names).to_dict()
    out = _out_dir(cfg)
    _write(out / "stats.json", _dump_json(report))
    _write(out / "stats.txt", stats_table(report))
    return {"output": str(out / "stats.json")}


def stats_table(report: dict) -> str:
    lines = [f"# {_header_lines(report['provenance'])[0]}",
             f"{'model':<16} {'fit':<12} {'r2':>10} {'converged':>10}  params"]
    for name, fits in report["fits"].items():
        for kind, fit in fits.items():
            params = " ".join(f"{k}={v:.6g}" for k, v in fit["params"].items())
            lines.append(f"{name:<16} {kind:<12} {fit['r2']:>10.6f} {str(fit['converged']):>10}  {params}")
    if "dunn" in report:
        kw = report["dunn"]["kruskal_wallis"]
        lines.append(f"Kruskal-Wallis H={kw['h']:.6g} p={kw['p']:.6g}")
        lines.append(f"{'pair':<34} {'z':>10} {'p_raw':>12} {'p_adj':>12}")
        for p in report["dunn"]["pairs"]:
            pair = f"{p['group_a']} vs {p['group_b']}"
            lines.append(f"{pair:<34} {p['z']:>10.4f} {p['p_raw']:>12.4g} {p['p_adj']:>12.4g}")
    return "\n".join(lines) + "\n"


# entry point ---------------------------------------------------------------------


def _limit_threads() -> None:
    value = os.environ.get(THREADS_ENV)
    if not value:
        return
    n = int(value)
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer")
    from threadpoolctl import threadpool_limits
    threadpool_limits(n)
    try:
        import numba
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    except ImportError:
        pass


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="neural-reserve", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML experiment file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override any setting, e.g. --set finetune.epochs=1")
    common.add_argument("--seed", type=int, dest="o_seed")
    common.add_argument("--out", dest="o_output_dir", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", parents=[common], help="clean CHAT transcripts into JSON lines")
    p.add_argument("--input-dir", dest="o_preprocess.input_dir")
    p.add_argument("--manifest", dest="o_preprocess.manifest")
    p.add_argument("--output", dest="o_preprocess.output")

    model_flags = argparse.ArgumentParser(add_help=False)
    model_flags.add_argument("--weights", dest="o_model.weights")
    model_flags.add_argument("--dementia-weights", dest="o_model.dementia_weights")

    p = sub.add_parser("rank", parents=[common, model_flags], help="rank heads by fine-tuning gradients")
    p.add_argument("--train", dest="o_corpus.train")

    for name in ("sweep-heads", "sweep-embeddings"):
        p = sub.add_parser(name, parents=[common, model_flags], help="masking sweep")
        p.add_argument("--eval", dest="o_corpus.eval")
        p.add_argument("--test", dest="o_corpus.test")
        p.add_argument("--step", type=int, dest="o_sweep.step")
        p.add_argument("--max-pct", type=int, dest="o_sweep.max_pct")
        if name == "sweep-heads":
            p.add_argument("--ranking", dest="o_sweep.ranking")

    p = sub.add_parser("classify", parents=[common, model_flags], help="paired-perplexity classification")
    p.add_argument("--test", dest="o_corpus.test")
    p.add_argument("--ranking", dest="o_sweep.ranking")
    p.add_argument("--kind", choices=("heads", "embeddings"), dest="o_classify.kind")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--pct", type=int, dest="o_classify.pct")
    group.add_argument("--best-from", dest="o_classify.best_from")

    p = sub.add_parser("stats", parents=[common], help="fits and Dunn tests over sweep CSVs")
    p.add_argument("sweeps", nargs="*", help="sweep CSV files")
    p.add_argument("--names", nargs="+", dest="o_stats.names")
    p.add_argument("--adjustment", choices=("bonferroni", "holm", "none"), dest="o_stats.adjustment")
    return parser


# Flags naming files; they resolve against the working directory, not the config file.
_PATH_FLAGS = {"output_dir", "preprocess.input_dir", "preprocess.manifest", "preprocess.output",
               "model.weights", "model.dementia_weights", "corpus.train", "corpus.eval",
               "corpus.test", "sweep.ranking", "classify.best_from"}


def _overrides(args) -> dict:
    out = {}
    for key, value in vars(args).items():
        if key.startswith("o_"):
            dotted = key[2:]
            if dotted in _PATH_FLAGS and value is not None:
                value = str(Path(value).resolve())
            out[dotted] = value
    if getattr(args, "sweeps", None):
        out["stats.sweeps"] = [str(Path(p).resolve()) for p in args.sweeps]
    return out


COMMANDS = {
    "preprocess": cmd_preprocess,
    "rank": cmd_rank,
    "sweep-heads": lambda cfg: cmd_sweep(cfg, "heads"),
    "sweep-embeddings": lambda cfg: cmd_sweep(cfg, "embeddings"),
    "classify": cmd_classify,
    "stats": cmd_stats,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        args.overrides = _overrides(args)
        _limit_threads()
        cfg = resolve_config(args)
        summary = COMMANDS[args.command](cfg)
    except Exception as exc:
        logger.debug("command failed", exc_info=True)
        err = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        sys.stderr.write(json.dumps(err, sort_keys=True) + "\n")
        return 1
    sys.stdout.write(json.dumps(summary, sort_keys=True) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())

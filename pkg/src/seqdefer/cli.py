"""Experiment pipeline: gen -> trace -> train -> eval, plus sweep and verify.

Stages communicate through files inside one output directory, and every stage
writes a manifest recording the experiment-config hash plus the sha256 of each
file it read or wrote.  A later stage refuses to run when an upstream artifact
no longer matches its recorded hash, so silently-stale results are impossible:
edit an input or delete a checkpoint and the pipeline names the file and exits
with the data-error code instead of producing numbers.

Exit codes: 0 success, 2 bad configuration, 3 missing/stale/corrupt data,
4 verification failure.

Config files are flat ``key = value`` text with a ``schema = expconfig/v1``
line.  Values parse as int, float, or bool when they look like one and stay
strings otherwise; lists are comma-separated strings.  Parse -> serialize ->
parse is an identity, and the config hash is the sha256 of the canonical
sorted-key serialization, so two configs that spell the same settings
differently still land in the same run directory.  Unknown keys are rejected:
a typo fails loudly instead of silently falling back to a default.

All artifact writers are deterministic byte-for-byte, so rerunning any stage
with the same config reproduces identical files.  Environment variables are
never consulted; the config file and explicit flags are the whole input.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import baselines
from .core import (ConfigError, DataError, derive_rng, read_traces,
                   recommend_alpha1, trace_to_dict, write_traces)
from .evaluation import (alpha_sweep, audc, content_hash_bytes,
                         content_hash_file, curve_onetime, curve_token,
                         curve_whole, j_sweep, pct_improvement, write_curve_csv,
                         write_manifest, write_summary_csv)
from .rejectors import (RolloutMode, committee_onetime_scores,
                        committee_token_scores, load_checkpoint,
                        save_checkpoint, train_onetime_committee,
                        train_token_committee)
from .surrogates import PHI_KINDS, PSI_KINDS
from .tasks import make_task

EXPCONFIG_SCHEMA = "expconfig/v1"
WHOLE_SCHEMA = "wholeembed/v1"

TOP_KEYS = {
    "schema", "task", "seeds", "n_train", "n_test", "views", "baselines",
    "alpha1", "conf_kind", "chow_q", "sweep", "sweep_sizes", "sweep_alphas",
    "sweep_configs",
}
KEY_PREFIXES = ("task.", "train.token.", "train.onetime.")

DEFAULTS = {
    "seeds": "0,1,2,3,4",
    "n_train": 300,
    "n_test": 100,
    "baselines": "chow_sum,chow_mean,chow_quantile,whole_embed",
    "alpha1": "default",
    "conf_kind": "auto",
    "chow_q": 0.75,
    "sweep": "jsize",
    "sweep_sizes": "",
    "sweep_alphas": "0.0,0.2,0.4,0.8",
    "sweep_configs": "",
}

BASELINE_NAMES = ("chow_sum", "chow_mean", "chow_quantile", "whole_embed")
SWEEP_KINDS = ("jsize", "alpha", "rollout", "matrix")
EXTERNAL_KEYS = {"tsp": "task.coords_path", "mwp": "task.csv_path",
                 "text": "task.chain_path"}

TRAIN_FIELD_NAMES = {"kind", "learning_rate", "epochs", "batch_size",
                     "patience", "min_delta", "weight_decay", "grad_clip_norm",
                     "val_fraction"}
TRAIN_INT_FIELDS = {"epochs", "batch_size", "patience"}
ARCH_FIELD_NAMES = {"hidden", "state_dim", "dropout", "score_clamp"}


# ---------------------------------------------------------------------------
# expconfig/v1: flat key = value files


def _coerce(raw: str):
    if raw.lower() == "true":
        return True
    if raw.lower() == "false":
        return False
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        pass
    return raw


def parse_config_text(text: str, origin: str = "<config>") -> dict:
    """Parse flat key = value lines; '#' starts a comment, blanks are skipped."""
    cfg = {}
    for ln, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{origin}:{ln}: expected 'key = value', got {line!r}")
        key, _, raw = body.partition("=")
        key, raw = key.strip(), raw.strip()
        if not key:
            raise ConfigError(f"{origin}:{ln}: empty key")
        if key in cfg:
            raise ConfigError(f"{origin}:{ln}: duplicate key {key!r}")
        cfg[key] = _coerce(raw)
    if cfg.get("schema") != EXPCONFIG_SCHEMA:
        raise ConfigError(f"{origin}: missing or unsupported schema line; "
                          f"expected 'schema = {EXPCONFIG_SCHEMA}'")
    unknown = sorted(k for k in cfg
                     if k not in TOP_KEYS and not k.startswith(KEY_PREFIXES))
    if unknown:
        raise ConfigError(f"{origin}: unknown keys {unknown}; known top-level "
                          f"keys are {sorted(TOP_KEYS)} plus "
                          f"{list(KEY_PREFIXES)} prefixes")
    return cfg


def serialize_config(cfg: dict) -> str:
    """Canonical sorted-key form; parse(serialize(cfg)) == cfg."""
    lines = []
    for key in sorted(cfg):
        v = cfg[key]
        if isinstance(v, bool):
            s = "true" if v else "false"
        elif isinstance(v, float):
            s = repr(v)
        else:
            s = str(v)
        lines.append(f"{key} = {s}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: dict) -> str:
    return content_hash_bytes(serialize_config(cfg).encode())[:12]


def _int_list(value, keyname: str) -> list[int]:
    if isinstance(value, int) and not isinstance(value, bool):
        return [value]
    parts = [p.strip() for p in str(value).split(",") if p.strip()]
    if not parts:
        raise ConfigError(f"{keyname} must be a comma-separated list of ints")
    try:
        return [int(p) for p in parts]
    except ValueError:
        raise ConfigError(f"{keyname}: not all entries are ints: {value!r}") from None


def _float_list(value, keyname: str) -> list[float]:
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return [float(value)]
    parts = [p.strip() for p in str(value).split(",") if p.strip()]
    if not parts:
        raise ConfigError(f"{keyname} must be a comma-separated list of numbers")
    try:
        return [float(p) for p in parts]
    except ValueError:
        raise ConfigError(f"{keyname}: not all entries are numbers: {value!r}") from None


def _str_list(value) -> list[str]:
    return [p.strip() for p in str(value).split(",") if p.strip()]


def task_params(cfg: dict) -> dict:
    return {k[len("task."):]: v for k, v in cfg.items() if k.startswith("task.")}


def probe_adapter(cfg: dict, alpha1: float = 0.0):
    """Adapter built from the config's task.* keys alone (no pipeline paths)."""
    params = task_params(cfg)
    params["alpha1"] = alpha1
    try:
        return make_task(cfg["task"], **params)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"bad task parameters: {exc}") from None


def finalize_config(cfg: dict, origin: str = "<config>") -> dict:
    """Fill defaults and validate; the result is the canonical config."""
    if "task" not in cfg:
        raise ConfigError(f"{origin}: missing required key 'task'")
    if "task.alpha1" in cfg:
        raise ConfigError(f"{origin}: set the top-level 'alpha1' key instead of "
                          f"'task.alpha1' (use 'default' for the pilot-run rule)")
    if "task.csv_stride" in cfg and "task.csv_path" not in cfg:
        raise ConfigError(f"{origin}: task.csv_stride only applies when an "
                          f"external task.csv_path is given")
    for key, val in DEFAULTS.items():
        cfg.setdefault(key, val)
    adapter = probe_adapter(cfg)
    cfg.setdefault("views", "token,onetime" if adapter.token_mode else "onetime")

    views = _str_list(cfg["views"])
    if not views:
        raise ConfigError(f"{origin}: views must name at least one of token, onetime")
    for view in views:
        if view not in ("token", "onetime"):
            raise ConfigError(f"{origin}: unknown view {view!r}")
        if view == "token" and adapter.token_mode is None:
            raise ConfigError(f"{origin}: task {cfg['task']!r} does not support "
                              f"token-level deferral")
    for b in _str_list(cfg["baselines"]):
        if b not in BASELINE_NAMES:
            raise ConfigError(f"{origin}: unknown baseline {b!r}; "
                              f"expected from {list(BASELINE_NAMES)}")
    kind = cfg["conf_kind"]
    if kind not in ("auto", "entropy") and kind != adapter.conf_kind:
        raise ConfigError(f"{origin}: confidence kind {kind!r} unavailable; task "
                          f"{cfg['task']!r} records {adapter.conf_kind!r}")
    if kind == "entropy" and not adapter.has_entropy:
        raise ConfigError(f"{origin}: task {cfg['task']!r} records no per-step "
                          f"entropy; entropy confidence baselines are unavailable")
    a1 = cfg["alpha1"]
    if a1 != "default":
        if not isinstance(a1, (int, float)) or isinstance(a1, bool) or a1 < 0:
            raise ConfigError(f"{origin}: alpha1 must be 'default' or a number >= 0")
    if not isinstance(cfg["n_train"], int) or cfg["n_train"] < 1:
        raise ConfigError(f"{origin}: n_train must be an int >= 1")
    if not isinstance(cfg["n_test"], int) or cfg["n_test"] < 1:
        raise ConfigError(f"{origin}: n_test must be an int >= 1")
    seeds = _int_list(cfg["seeds"], "seeds")
    if any(s < 0 for s in seeds) or len(set(seeds)) != len(seeds):
        raise ConfigError(f"{origin}: seeds must be distinct ints >= 0")
    q = cfg["chow_q"]
    if not isinstance(q, (int, float)) or isinstance(q, bool) or not 0 <= q <= 1:
        raise ConfigError(f"{origin}: chow_q must be in [0, 1]")
    if cfg["sweep"] not in SWEEP_KINDS:
        raise ConfigError(f"{origin}: unknown sweep kind {cfg['sweep']!r}; "
                          f"expected from {list(SWEEP_KINDS)}")
    if cfg["sweep_sizes"] != "":
        sizes = _int_list(cfg["sweep_sizes"], "sweep_sizes")
        if any(s < 2 for s in sizes):
            raise ConfigError(f"{origin}: sweep_sizes entries must be >= 2")
    for a in _float_list(cfg["sweep_alphas"], "sweep_alphas"):
        if a < 0:
            raise ConfigError(f"{origin}: sweep_alphas entries must be >= 0")
    return cfg


def load_config(path, seed_override=None, oracle: bool = False) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    cfg = parse_config_text(p.read_text(), origin=str(p))
    if oracle:
        if cfg.get("task") != "tsp":
            raise ConfigError("--oracle only applies to the tsp task")
        n_c = cfg.get("task.n_cities", 50)
        if not isinstance(n_c, int) or n_c > 12:
            raise ConfigError("--oracle needs task.n_cities <= 12 (the exact "
                              "expert enumerates tour completions)")
        cfg["task.exact_expert"] = True
    if seed_override is not None:
        cfg["seeds"] = int(seed_override)
    return finalize_config(cfg, origin=str(p))


# ---------------------------------------------------------------------------
# manifests and staleness


def _require_file(path: Path, stage_hint: str) -> None:
    if not path.exists():
        raise DataError(f"missing {path}; run '{stage_hint}' first")


def _load_manifest(path: Path, cfg_hash: str, stage_hint: str) -> dict:
    _require_file(path, stage_hint)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: corrupt manifest ({exc})") from None
    if doc.get("config_hash") != cfg_hash:
        raise DataError(f"{path}: written for config {doc.get('config_hash')!r} "
                        f"but the current config hashes to {cfg_hash!r}; "
                        f"re-run '{stage_hint}' (or point --out elsewhere)")
    return doc


def _check_outputs_fresh(out: Path, doc: dict, stage_hint: str) -> None:
    for rel in sorted(doc.get("outputs", {})):
        p = out / rel
        _require_file(p, stage_hint)
        if content_hash_file(p) != doc["outputs"][rel]:
            raise DataError(f"{p}: content changed since '{stage_hint}' recorded "
                            f"it (stale artifact); re-run '{stage_hint}'")
    for ext in sorted(doc.get("external", {})):
        p = Path(ext)
        if not p.exists():
            raise DataError(f"{p}: external input recorded by '{stage_hint}' is gone")
        if content_hash_file(p) != doc["external"][ext]:
            raise DataError(f"{p}: external input changed since '{stage_hint}' "
                            f"ran; re-run the pipeline")


def _upstream(out: Path, cfg_hash: str, *stages: str) -> dict:
    """Load and freshness-check the named stage manifests; returns them by name."""
    docs = {}
    for stage in stages:
        doc = _load_manifest(out / f"manifest-{stage}.json", cfg_hash, stage)
        _check_outputs_fresh(out, doc, stage)
        docs[stage] = doc
    return docs


def _map_ordered(fn, items, jobs: int) -> list:
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


def mean_std(values) -> str:
    arr = np.asarray(list(values), dtype=np.float64)
    return f"{arr.mean():.4f}({arr.std():.4f})"


# ---------------------------------------------------------------------------
# adapters bound to run artifacts


def pipeline_adapter(cfg: dict, out: Path, seed: int, alpha1_value: float):
    """Adapter reading this run's generated inputs (or the user's external file)."""
    params = task_params(cfg)
    params["alpha1"] = float(alpha1_value)
    name = cfg["task"]
    if name == "tsp" and "coords_path" not in params:
        params["coords_path"] = out / f"inputs-seed{seed}.json"
    elif name == "mwp" and "csv_path" not in params:
        from .tasks.mwp import HISTORY, HORIZON

        params["csv_path"] = out / f"inputs-seed{seed}.csv"
        params["csv_stride"] = HISTORY + HORIZON  # one independent window per row
    elif name == "text" and "chain_path" not in params:
        params["chain_path"] = out / "chain.json"
    try:
        return make_task(name, **params)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"bad task parameters: {exc}") from None


def resolve_alpha1(cfg: dict, make_pilot) -> float:
    """Numeric alpha1 from the config, or the pilot-run recommendation.

    make_pilot() must return an adapter built with alpha1 = 0 so the stored
    full losses are pure quality terms.
    """
    if cfg["alpha1"] != "default":
        return float(cfg["alpha1"])
    seeds = _int_list(cfg["seeds"], "seeds")
    n_pilot = min(int(cfg["n_train"]), 128)
    pilot_train, _ = make_pilot().build_dataset(n_pilot, 1, seeds[0])
    return recommend_alpha1(pilot_train)


def resolve_recipe(adapter, cfg: dict, view: str, seed: int) -> dict:
    """Task's tuned trainer settings with any train.<view>.* overrides applied."""
    recipe = adapter.train_recipe(view, seed)
    config, arch = recipe["config"], dict(recipe["arch"])
    members = int(recipe["members"])
    prefix = f"train.{view}."
    for key in sorted(cfg):
        if not key.startswith(prefix):
            continue
        name, val = key[len(prefix):], cfg[key]
        try:
            if name == "members":
                members = int(val)
            elif name == "rollout":
                config = replace(config, rollout=RolloutMode(variant=str(val)))
            elif name == "kind":
                config = replace(config, kind=str(val))
            elif name in TRAIN_FIELD_NAMES:
                coerced = int(val) if name in TRAIN_INT_FIELDS else float(val)
                config = replace(config, **{name: coerced})
            elif name == "hidden":
                arch["hidden"] = tuple(int(x) for x in _str_list(val))
            elif name == "state_dim":
                arch["state_dim"] = int(val)
            elif name in ARCH_FIELD_NAMES:
                arch[name] = float(val)
            else:
                raise ConfigError(f"unknown training key {key!r}")
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}") from None
    allowed = PHI_KINDS if view == "token" else PSI_KINDS
    if config.kind not in allowed:
        raise ConfigError(f"{view} training needs a surrogate kind from "
                          f"{list(allowed)}, got {config.kind!r}")
    if members < 1:
        raise ConfigError("committee members must be >= 1")
    return {"config": config, "arch": arch, "members": members}


def _resolved_conf_kind(cfg: dict, adapter) -> str:
    kind = cfg["conf_kind"]
    return adapter.conf_kind if kind == "auto" else kind


# ---------------------------------------------------------------------------
# gen: write world inputs


def _validate_external(task: str, path: Path) -> None:
    if task == "tsp":
        from .tasks.tsp import read_coords

        read_coords(path)
    elif task == "mwp":
        from .tasks.mwp import load_series_csv

        load_series_csv(path)
    else:
        from .tasks.text import read_chain

        read_chain(path)


def do_gen(cfg: dict, out: Path, jobs: int = 1) -> dict:
    h = config_hash(cfg)
    seeds = _int_list(cfg["seeds"], "seeds")
    task = cfg["task"]
    n_total = cfg["n_train"] + cfg["n_test"]
    outputs, external = {}, {}
    ext_key = EXTERNAL_KEYS[task]
    if ext_key in cfg:
        path = Path(str(cfg[ext_key]))
        if not path.exists():
            raise DataError(f"{path}: external input not found")
        _validate_external(task, path)
        external[str(path)] = content_hash_file(path)
    elif task == "text":
        from .tasks.text import write_chain

        probe = probe_adapter(cfg)
        write_chain(out / "chain.json", probe.chain())
        outputs["chain.json"] = content_hash_file(out / "chain.json")
    elif task == "tsp":
        from .tasks.tsp import write_coords

        probe = probe_adapter(cfg)

        def one(seed):
            rng = derive_rng(9001, seed)
            coords = np.stack([probe.sample_coords(rng) for _ in range(n_total)])
            name = f"inputs-seed{seed}.json"
            write_coords(out / name, coords)
            return {name: content_hash_file(out / name)}

        for files in _map_ordered(one, seeds, jobs):
            outputs.update(files)
    else:  # mwp
        from .tasks.mwp import simulate_world

        probe = probe_adapter(cfg)

        def one(seed):
            data, _, _ = simulate_world(n_total, derive_rng(9101, seed),
                                        probe.sigma_lo, probe.sigma_hi,
                                        amplitude=probe.amplitude)
            name = f"inputs-seed{seed}.csv"
            with open(out / name, "w") as fh:
                fh.write("value\n")
                for v in data.reshape(-1):
                    fh.write(repr(float(v)) + "\n")
            return {name: content_hash_file(out / name)}

        for files in _map_ordered(one, seeds, jobs):
            outputs.update(files)
    write_manifest(out / "manifest-gen.json", h, seeds, inputs={},
                   extra={"stage": "gen", "task": task, "outputs": outputs,
                          "external": external})
    return {"outputs": outputs, "external": external}


# ---------------------------------------------------------------------------
# trace: build and persist deferral traces


def do_trace(cfg: dict, out: Path, jobs: int = 1) -> float:
    h = config_hash(cfg)
    seeds = _int_list(cfg["seeds"], "seeds")
    docs = _upstream(out, h, "gen")
    alpha1_used = resolve_alpha1(
        cfg, lambda: pipeline_adapter(cfg, out, seeds[0], 0.0))

    def one(seed):
        adapter = pipeline_adapter(cfg, out, seed, alpha1_used)
        train, test = adapter.build_dataset(cfg["n_train"], cfg["n_test"], seed)
        files = {}
        for split, traces in (("train", train), ("test", test)):
            name = f"traces-{split}-seed{seed}.ndjson"
            write_traces(out / name, traces)
            files[name] = content_hash_file(out / name)
        return files

    outputs = {}
    for files in _map_ordered(one, seeds, jobs):
        outputs.update(files)
    write_manifest(out / "manifest-trace.json", h, seeds,
                   inputs=docs["gen"].get("outputs", {}),
                   extra={"stage": "trace", "outputs": outputs,
                          "external": docs["gen"].get("external", {}),
                          "alpha1_used": alpha1_used})
    return alpha1_used


# ---------------------------------------------------------------------------
# train: fit rejector committees and the whole-sequence baseline


def _save_whole(path: Path, model) -> None:
    doc = {"schema": WHOLE_SCHEMA, "mu": model.mu.tolist(),
           "sd": model.sd.tolist(), "w": model.w.tolist(), "b": model.b}
    with open(path, "w") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def _load_whole(path: Path):
    _require_file(path, "train")
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("schema") != WHOLE_SCHEMA:
        raise DataError(f"{path}: expected schema {WHOLE_SCHEMA!r}, "
                        f"got {doc.get('schema')!r}")
    return baselines.WholeEmbed(np.array(doc["mu"], dtype=np.float64),
                                np.array(doc["sd"], dtype=np.float64),
                                np.array(doc["w"], dtype=np.float64),
                                float(doc["b"]))


def _read_trace_file(path: Path, stage_hint: str = "trace") -> list:
    _require_file(path, stage_hint)
    try:
        return read_traces(path)
    except ValueError as exc:
        raise DataError(str(exc)) from None


def do_train(cfg: dict, out: Path, jobs: int = 1) -> dict:
    h = config_hash(cfg)
    seeds = _int_list(cfg["seeds"], "seeds")
    docs = _upstream(out, h, "gen", "trace")
    alpha1_used = float(docs["trace"]["alpha1_used"])
    views = _str_list(cfg["views"])
    baseline_list = _str_list(cfg["baselines"])
    recipe_adapter = pipeline_adapter(cfg, out, seeds[0], alpha1_used)

    def one(seed):
        train_traces = _read_trace_file(out / f"traces-train-seed{seed}.ndjson")
        files = {}
        for view in views:
            recipe = resolve_recipe(recipe_adapter, cfg, view, seed)
            if view == "token":
                models = train_token_committee(train_traces, recipe["config"],
                                               recipe["members"], **recipe["arch"])
            else:
                models = train_onetime_committee(train_traces, None,
                                                 recipe["config"],
                                                 recipe["members"],
                                                 **recipe["arch"])
            for i, model in enumerate(models):
                name = f"model-{view}-seed{seed}-m{i}.json"
                save_checkpoint(out / name, model, recipe["config"])
                files[name] = content_hash_file(out / name)
        if "whole_embed" in baseline_list:
            model, _ = baselines.train_whole_embed(train_traces, seed=seed)
            name = f"whole-seed{seed}.json"
            _save_whole(out / name, model)
            files[name] = content_hash_file(out / name)
        return files

    outputs = {}
    for files in _map_ordered(one, seeds, jobs):
        outputs.update(files)
    write_manifest(out / "manifest-train.json", h, seeds,
                   inputs=docs["trace"].get("outputs", {}),
                   extra={"stage": "train", "outputs": outputs, "views": views,
                          "alpha1_used": alpha1_used})
    return outputs


# ---------------------------------------------------------------------------
# eval: deferral curves, AUDC, and the mean(std) summary


def _load_members(out: Path, view: str, seed: int, members: int) -> list:
    models = []
    for i in range(members):
        path = out / f"model-{view}-seed{seed}-m{i}.json"
        _require_file(path, "train")
        try:
            model, _ = load_checkpoint(path)
        except (ValueError, KeyError) as exc:
            raise DataError(f"{path}: unreadable checkpoint ({exc})") from None
        models.append(model)
    return models


def _eval_one_seed(cfg: dict, out: Path, seed: int, alpha1_used: float):
    adapter = pipeline_adapter(cfg, out, seed, alpha1_used)
    train, test = adapter.build_dataset(cfg["n_train"], cfg["n_test"], seed)
    del train
    blob = "".join(json.dumps(trace_to_dict(t)) + "\n" for t in test).encode()
    disk = out / f"traces-test-seed{seed}.ndjson"
    _require_file(disk, "trace")
    if content_hash_bytes(blob) != content_hash_file(disk):
        raise DataError(f"{disk}: stored traces no longer match a fresh rebuild "
                        f"from the generated inputs; re-run 'trace'")
    tf = adapter.curve_transform()
    rand_audc = baselines.random_audc_analytic(test, loss_transform=tf)
    conf_kind = _resolved_conf_kind(cfg, adapter)
    curves, rows = [], []

    def add(curve, method):
        a = audc(curve)
        curves.append(curve)
        rows.append({"method": method, "audc": a,
                     "pct_improvement": pct_improvement(a, rand_audc),
                     "seed": seed})

    for view in _str_list(cfg["views"]):
        recipe = resolve_recipe(adapter, cfg, view, seed)
        models = _load_members(out, view, seed, recipe["members"])
        if view == "token":
            mode = adapter.token_mode
            reroll = adapter.token_reroll(test) if mode == "reroll" else None
            scores = committee_token_scores(models, test)
            add(curve_token(test, scores, mode=mode, reroll_fn=reroll,
                            loss_transform=tf, method="token_model"),
                "token_model")
            conf = baselines.conf_matrix(conf_kind, test, adapter.conf_kind)
            add(curve_token(test, conf, mode=mode, reroll_fn=reroll,
                            loss_transform=tf, method="token_score"),
                "token_score")
        else:
            g = committee_onetime_scores(models, test)
            add(curve_onetime(test, g, None, loss_transform=tf,
                              method="onetime_model"), "onetime_model")
            g_conf = np.stack([
                baselines.onetime_conf(conf_kind, t, None, adapter.conf_kind)
                for t in test])
            add(curve_onetime(test, g_conf, None, loss_transform=tf,
                              method="onetime_score"), "onetime_score")
    for b in _str_list(cfg["baselines"]):
        if b.startswith("chow_"):
            kind = b[len("chow_"):]
            q = cfg["chow_q"] if kind == "quantile" else None
            scores = baselines.chow_scores(kind, test, q)
            add(curve_whole(test, scores, loss_transform=tf,
                            method=f"whole_{b}"), f"whole_{b}")
        else:  # whole_embed
            model = _load_whole(out / f"whole-seed{seed}.json")
            scores = baselines.whole_scores(model, test)
            add(curve_whole(test, scores, loss_transform=tf,
                            method="whole_embed"), "whole_embed")
    name = f"curves-seed{seed}.csv"
    write_curve_csv(out / name, curves, config_hash(cfg))
    return rows, {name: content_hash_file(out / name)}


def _write_mean_summary(path: Path, rows: list[dict], h: str,
                        group_keys: tuple[str, ...] = ("method",)) -> list[dict]:
    """Aggregate per-seed rows into mean(std) strings, one row per group."""
    groups = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in group_keys), []).append(r)
    agg = []
    for key in sorted(groups):
        block = groups[key]
        agg.append({**dict(zip(group_keys, key)),
                    "audc": mean_std(r["audc"] for r in block),
                    "pct_improvement": mean_std(r["pct_improvement"]
                                                for r in block),
                    "n_seeds": len(block)})
    with open(path, "w") as fh:
        fh.write(f"# config_hash={h}\n")
        fh.write(",".join(list(group_keys) + ["audc", "pct_improvement",
                                              "n_seeds"]) + "\n")
        for r in agg:
            cells = [str(r[k]) for k in group_keys]
            fh.write(",".join(cells + [r["audc"], r["pct_improvement"],
                                       str(r["n_seeds"])]) + "\n")
    return agg


def do_eval(cfg: dict, out: Path, jobs: int = 1) -> list[dict]:
    h = config_hash(cfg)
    seeds = _int_list(cfg["seeds"], "seeds")
    docs = _upstream(out, h, "gen", "trace", "train")
    alpha1_used = float(docs["trace"]["alpha1_used"])

    results = _map_ordered(
        lambda seed: _eval_one_seed(cfg, out, seed, alpha1_used), seeds, jobs)
    all_rows, outputs = [], {}
    for rows, files in results:
        all_rows.extend(rows)
        outputs.update(files)
    write_summary_csv(out / "summary.csv", all_rows, h)
    outputs["summary.csv"] = content_hash_file(out / "summary.csv")
    agg = _write_mean_summary(out / "summary-mean.csv", all_rows, h)
    outputs["summary-mean.csv"] = content_hash_file(out / "summary-mean.csv")
    write_manifest(out / "manifest-eval.json", h, seeds,
                   inputs=docs["train"].get("outputs", {}),
                   extra={"stage": "eval", "outputs": outputs,
                          "alpha1_used": alpha1_used})
    return agg


# ---------------------------------------------------------------------------
# sweep: grid-size, price, rollout-ablation, and config-matrix studies


def _sweep_adapter(cfg: dict):
    alpha1_used = resolve_alpha1(cfg, lambda: probe_adapter(cfg, alpha1=0.0))
    return probe_adapter(cfg, alpha1=alpha1_used)


def _write_rows_csv(path: Path, rows: list[dict], columns: list[str],
                    h: str) -> None:
    with open(path, "w") as fh:
        fh.write(f"# config_hash={h}\n")
        fh.write(",".join(columns) + "\n")
        for r in rows:
            fh.write(",".join(repr(r[c]) if isinstance(r[c], float) else str(r[c])
                              for c in columns) + "\n")


def _sweep_jsize(cfg: dict, out: Path, jobs: int) -> dict:
    adapter = _sweep_adapter(cfg)
    if cfg["sweep_sizes"] == "":
        sizes = [5, 10, 25]
    else:
        sizes = _int_list(cfg["sweep_sizes"], "sweep_sizes")
    sizes = sorted(set(min(s, adapter.L + 1) for s in sizes) | {adapter.L + 1})
    seeds = _int_list(cfg["seeds"], "seeds")
    rows = j_sweep(adapter, sizes, seeds, cfg["n_train"], cfg["n_test"])
    h = config_hash(cfg)
    _write_rows_csv(out / "sweep-jsize.csv", rows,
                    ["size", "seed", "method", "audc", "pct_improvement"], h)
    _write_mean_summary(out / "sweep-jsize-mean.csv", rows, h,
                        group_keys=("size", "method"))
    return {"sweep-jsize.csv": content_hash_file(out / "sweep-jsize.csv"),
            "sweep-jsize-mean.csv": content_hash_file(out / "sweep-jsize-mean.csv")}


def _sweep_alpha(cfg: dict, out: Path, jobs: int) -> dict:
    alphas = _float_list(cfg["sweep_alphas"], "sweep_alphas")
    seeds = _int_list(cfg["seeds"], "seeds")
    rows = alpha_sweep(lambda a1: probe_adapter(cfg, alpha1=a1), alphas, None,
                       seeds[0], cfg["n_train"], cfg["n_test"])
    h = config_hash(cfg)
    _write_rows_csv(out / "sweep-alpha.csv", rows,
                    ["alpha1", "audc", "pct_improvement",
                     "mean_deferred_at_argmax"], h)
    return {"sweep-alpha.csv": content_hash_file(out / "sweep-alpha.csv")}


def _sweep_rollout(cfg: dict, out: Path, jobs: int) -> dict:
    adapter = _sweep_adapter(cfg)
    if adapter.token_mode is None:
        raise ConfigError(f"task {cfg['task']!r} does not support token-level "
                          f"deferral, so there is no rollout ablation to run")
    seeds = _int_list(cfg["seeds"], "seeds")
    variants = ("teacher_forced", "scheduled", "free_running")

    def one(seed):
        train, test = adapter.build_dataset(cfg["n_train"], cfg["n_test"], seed)
        tf = adapter.curve_transform()
        rand_audc = baselines.random_audc_analytic(test, loss_transform=tf)
        mode = adapter.token_mode
        reroll = adapter.token_reroll(test) if mode == "reroll" else None
        recipe = resolve_recipe(adapter, cfg, "token", seed)
        out_rows = []
        for variant in variants:
            # the three training configs differ only in the rollout schedule
            config = replace(recipe["config"], rollout=RolloutMode(variant=variant))
            models = train_token_committee(train, config, recipe["members"],
                                           **recipe["arch"])
            scores = committee_token_scores(models, test)
            curve = curve_token(test, scores, mode=mode, reroll_fn=reroll,
                                loss_transform=tf,
                                method=f"token_model_{variant}")
            a = audc(curve)
            out_rows.append({"rollout": variant, "seed": seed, "audc": a,
                             "pct_improvement": pct_improvement(a, rand_audc)})
        return out_rows

    rows = [r for block in _map_ordered(one, seeds, jobs) for r in block]
    h = config_hash(cfg)
    _write_rows_csv(out / "sweep-rollout.csv", rows,
                    ["rollout", "seed", "audc", "pct_improvement"], h)
    _write_mean_summary(out / "sweep-rollout-mean.csv", rows, h,
                        group_keys=("rollout",))
    return {"sweep-rollout.csv": content_hash_file(out / "sweep-rollout.csv"),
            "sweep-rollout-mean.csv":
                content_hash_file(out / "sweep-rollout-mean.csv")}


def _sweep_matrix(cfg: dict, out: Path, jobs: int) -> dict:
    paths = _str_list(cfg["sweep_configs"])
    if not paths:
        raise ConfigError("sweep = matrix needs sweep_configs, a comma-separated "
                          "list of config file paths")
    merged = []
    for p in paths:
        sub = load_config(p)
        sub_h = config_hash(sub)
        subdir = out / f"matrix-{Path(p).stem}-{sub_h[:6]}"
        subdir.mkdir(parents=True, exist_ok=True)
        do_gen(sub, subdir, jobs)
        do_trace(sub, subdir, jobs)
        do_train(sub, subdir, jobs)
        agg = do_eval(sub, subdir, jobs)
        for r in agg:
            merged.append({"config": p, **r})
    h = config_hash(cfg)
    path = out / "sweep-matrix.csv"
    with open(path, "w") as fh:
        fh.write(f"# config_hash={h}\n")
        fh.write("config,method,audc,pct_improvement,n_seeds\n")
        for r in merged:
            fh.write(f"{r['config']},{r['method']},{r['audc']},"
                     f"{r['pct_improvement']},{r['n_seeds']}\n")
    return {"sweep-matrix.csv": content_hash_file(path)}


def do_sweep(cfg: dict, out: Path, jobs: int = 1) -> dict:
    kind = cfg["sweep"]
    runner = {"jsize": _sweep_jsize, "alpha": _sweep_alpha,
              "rollout": _sweep_rollout, "matrix": _sweep_matrix}[kind]
    outputs = runner(cfg, out, jobs)
    write_manifest(out / "manifest-sweep.json", config_hash(cfg),
                   _int_list(cfg["seeds"], "seeds"), inputs={},
                   extra={"stage": "sweep", "kind": kind, "outputs": outputs})
    return outputs


# ---------------------------------------------------------------------------
# verify: invariant re-checks and artifact audit


def _library_checks() -> list[tuple[str, bool, str]]:
    from . import consistency as cons
    from . import surrogates as sg
    from .rejectors import onetime_default_config, onetime_scores, \
        train_onetime_rejector
    from .tasks.tsp import TSPTask

    checks = []

    def record(name, fn):
        try:
            detail = fn()
            checks.append((name, True, detail or ""))
        except AssertionError as exc:
            checks.append((name, False, str(exc)))

    worlds = cons.make_fixed_worlds()

    def check_token_bayes():
        details = []
        for name, world in sorted(worlds.items()):
            if isinstance(world, cons.FiniteTokenWorld) and world.K * world.L <= 16:
                _, closed = cons.bayes_token(world)
                _, brute = cons.bayes_token_by_enumeration(world)
                assert abs(closed - brute) < 1e-12, \
                    f"{name}: closed {closed} vs enumerated {brute}"
                details.append(name)
        assert details, "no token world small enough to enumerate"
        return ",".join(details)

    record("token Bayes rule matches policy enumeration", check_token_bayes)

    def check_onetime_bayes():
        details = []
        for name, world in sorted(worlds.items()):
            if isinstance(world, cons.FiniteOneTimeWorld) and world.m ** world.K <= 1e5:
                _, closed = cons.bayes_onetime(world)
                _, brute = cons.bayes_onetime_by_enumeration(world)
                assert abs(closed - brute) < 1e-12, \
                    f"{name}: closed {closed} vs enumerated {brute}"
                details.append(name)
        assert details, "no one-time world small enough to enumerate"
        return ",".join(details)

    record("one-time Bayes rule matches policy enumeration", check_onetime_bayes)

    def check_gap_decay():
        for name, world in sorted(worlds.items()):
            kind = "logistic" if isinstance(world, cons.FiniteTokenWorld) else "ce"
            small = np.mean([cons.consistency_gap(world, kind, 64, s)["gap"]
                             for s in range(3)])
            big = np.mean([cons.consistency_gap(world, kind, 4096, s)["gap"]
                           for s in range(3)])
            assert big <= small + 1e-9, \
                f"{name}: gap grew from {small} (n=64) to {big} (n=4096)"
        return f"{len(worlds)} worlds"

    record("estimation gap shrinks with sample size", check_gap_decay)

    def check_dominance():
        rng = derive_rng(515151)
        for _ in range(500):
            l, c = rng.uniform(0, 3, size=2)
            r = rng.uniform(-4, 4)
            for kind in sg.PHI_KINDS:
                assert sg.dominance_margin_token(kind, l, c, r) >= -1e-12, \
                    f"{kind} surrogate fell below realized loss at l={l} c={c} r={r}"
        return "500 draws x 2 kinds"

    record("token surrogate dominates realized loss", check_dominance)

    tiny_train, tiny_test = TSPTask(n_cities=6).build_dataset(6, 2, 0)

    def check_identity():
        for trace in tiny_test:
            for j in trace.candidates:
                resid = sg.onetime_identity_residual(trace, None, j)
                assert abs(resid) < 1e-9, f"residual {resid} at j={j}"
        return f"{len(tiny_test)} traces x full candidate grid"

    record("one-time realized-loss decomposition is exact", check_identity)

    def check_curve_endpoints():
        scores = baselines.chow_scores("mean", tiny_test)
        curve = curve_whole(tiny_test, scores)
        model_end = float(np.mean([t.model_full_loss for t in tiny_test]))
        expert_end = float(np.mean([t.expert_full_loss for t in tiny_test]))
        assert curve.deferred[0] == 0.0 and abs(curve.losses[0] - model_end) < 1e-12, \
            "zero-deferral endpoint is not the model's mean full loss"
        assert abs(curve.losses[-1] - expert_end) < 1e-12, \
            "full-deferral endpoint is not the expert's mean full loss"
        assert np.isfinite(audc(curve)), "AUDC is not finite"
        return ""

    record("deferral curves pin both endpoints", check_curve_endpoints)

    def check_checkpoint():
        import tempfile

        cfg = replace(onetime_default_config(seed=0), epochs=3)
        model, _ = train_onetime_rejector(tiny_train, None, cfg)
        before = onetime_scores(model, tiny_test)
        with tempfile.TemporaryDirectory() as d:
            path = Path(d) / "m.json"
            save_checkpoint(path, model, cfg)
            loaded, _ = load_checkpoint(path)
        after = onetime_scores(loaded, tiny_test)
        assert np.array_equal(before, after), "reloaded scores differ bit-for-bit"
        return ""

    record("checkpoint save/load round trip is bit-exact", check_checkpoint)

    return checks


def _artifact_checks(out: Path, cfg: dict | None) -> list[tuple[str, bool, str]]:
    checks = []
    stages = [s for s in ("gen", "trace", "train", "eval", "sweep")
              if (out / f"manifest-{s}.json").exists()]
    if not stages:
        return checks
    h = config_hash(cfg) if cfg is not None else None
    for stage in stages:
        try:
            doc = json.loads((out / f"manifest-{stage}.json").read_text())
            if h is not None and doc.get("config_hash") != h:
                checks.append((f"{stage} artifacts match the config", False,
                               f"manifest hash {doc.get('config_hash')!r} != {h!r}"))
                continue
            _check_outputs_fresh(out, doc, stage)
            checks.append((f"{stage} artifacts are fresh", True,
                           f"{len(doc.get('outputs', {}))} files"))
        except DataError as exc:
            checks.append((f"{stage} artifacts are fresh", False, str(exc)))
    return checks


def do_verify(out: Path, cfg: dict | None) -> tuple[int, list[str]]:
    checks = _library_checks() + _artifact_checks(out, cfg)
    lines = []
    failed = 0
    for name, ok, detail in checks:
        suffix = f" ({detail})" if detail else ""
        if ok:
            lines.append(f"ok - {name}{suffix}")
        else:
            failed += 1
            lines.append(f"FAIL - {name}: {detail}")
    lines.append(f"{len(checks) - failed}/{len(checks)} checks passed")
    (out / "verify.txt").write_text("\n".join(lines) + "\n")
    return (0 if failed == 0 else 4), lines


# ---------------------------------------------------------------------------
# argument parsing and dispatch


def _resolve_out(args, cfg: dict | None) -> Path:
    if args.out is not None:
        out = Path(args.out)
    elif cfg is not None:
        out = Path(f"run-{config_hash(cfg)}")
    else:
        out = Path(".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config_from_args(args) -> dict:
    if args.config is None:
        raise ConfigError("this subcommand needs --config PATH")
    return load_config(args.config, seed_override=args.seed, oracle=args.oracle)


def _stage_command(args, runner, report):
    cfg = _config_from_args(args)
    out = _resolve_out(args, cfg)
    result = runner(cfg, out, args.jobs)
    report(cfg, out, result)
    return 0


def cmd_gen(args) -> int:
    def report(cfg, out, result):
        n = len(result["outputs"]) + len(result["external"])
        print(f"gen: {n} input file(s) ready under {out} "
              f"(config {config_hash(cfg)})")

    return _stage_command(args, do_gen, report)


def cmd_trace(args) -> int:
    def report(cfg, out, alpha1_used):
        seeds = _int_list(cfg["seeds"], "seeds")
        print(f"trace: wrote train/test traces for seeds {seeds} under {out} "
              f"(alpha1={alpha1_used!r})")

    return _stage_command(args, do_trace, report)


def cmd_train(args) -> int:
    def report(cfg, out, outputs):
        print(f"train: saved {len(outputs)} checkpoint file(s) under {out}")

    return _stage_command(args, do_train, report)


def cmd_eval(args) -> int:
    def report(cfg, out, agg):
        print(f"eval: wrote {out / 'summary.csv'} and {out / 'summary-mean.csv'}")
        for row in agg:
            print(f"  {row['method']}: audc {row['audc']}  "
                  f"pct_improvement {row['pct_improvement']}")

    return _stage_command(args, do_eval, report)


def cmd_sweep(args) -> int:
    def report(cfg, out, outputs):
        print(f"sweep[{cfg['sweep']}]: wrote {', '.join(sorted(outputs))} "
              f"under {out}")

    return _stage_command(args, do_sweep, report)


def cmd_verify(args) -> int:
    cfg = None
    if args.config is not None:
        cfg = load_config(args.config, seed_override=args.seed,
                          oracle=args.oracle)
    out = _resolve_out(args, cfg)
    code, lines = do_verify(out, cfg)
    print("\n".join(lines))
    print(f"report written to {out / 'verify.txt'}")
    return code


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="seqdefer",
        description="Deferral experiments: generate worlds, build traces, "
                    "train rejectors, evaluate deferral curves.")
    sub = parser.add_subparsers(dest="command", required=True)
    stages = {
        "gen": ("write world input files (or validate an external one)", cmd_gen),
        "trace": ("build deferral traces from the generated inputs", cmd_trace),
        "train": ("fit rejector committees and the whole-sequence baseline",
                  cmd_train),
        "eval": ("compute deferral curves, AUDC, and the mean(std) summary",
                 cmd_eval),
        "sweep": ("run the study named by the config's sweep key", cmd_sweep),
        "verify": ("re-check library invariants and artifact freshness",
                   cmd_verify),
    }
    for name, (help_text, fn) in stages.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None,
                       help="experiment config file (expconfig/v1)")
        p.add_argument("--seed", type=int, default=None,
                       help="restrict the run to this one seed")
        p.add_argument("--jobs", type=int, default=1,
                       help="worker threads for per-seed work")
        p.add_argument("--out", default=None,
                       help="output directory (default: run-<config hash>)")
        p.add_argument("--oracle", action="store_true",
                       help="tsp only: exact expert completions "
                            "(needs task.n_cities <= 12)")
        p.set_defaults(func=fn)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

"""Command-line front end.

``mixpost fit | predict | verify | exchangeability | simstudy``

Every command writes into ``--out-dir``.  Outputs are staged in a temporary
directory and only moved into place when the command succeeds, so a failed
run leaves nothing behind.  Exit codes: 0 success, 1 bad input, 2 numerical
failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import re
import shutil
import sys
import tempfile
import warnings
from pathlib import Path

import numpy as np

from .core import (GAUSSIAN, PRECIPITATION, DataError, Dataset, GammaNormalParams,
                   NumericalError, ParseError, SchemaError, SourceSpec, TobitParams,
                   ValidationError, load_dataset, params_from_json, params_to_json,
                   read_lead_times)
from .gamma_normal import EMConfig, fit_em, predict_student_batch
from .scenario import QuantileForecast, ecc_q, mid_quantile_levels
from .simstudy import STUDY_K, STUDY_PARAMS, StudyConfig, run_simulation_study
from .tobit import (SEMConfig, fit_power_transform, forecast_sample_batch,
                    sem_fit, write_forecast_samples)
from .verification import (RankHistogram, crps_sample_batch, crps_student,
                           exchangeability_rank_test, observation_ranks,
                           score_report, write_histogram_csv, write_score_csv)

EXIT_OK, EXIT_INPUT, EXIT_NUMERICAL = 0, 1, 2

DEFAULTS = {
    "data": None, "params": None, "forecasts": None, "kind": GAUSSIAN,
    "lead": None, "seed": 0, "samples": 1000, "ecc_template": None,
    "out_dir": ".", "source": None, "epsilon": 1e-6, "max_iterations": 500,
    "sem_iterations": 1000, "gibbs_iterations": 4, "forecast_iterations": 1100,
    "forecast_burn_in": 100, "replications": 100, "n_train": 100,
    "n_test": 100, "jobs": 1, "bootstrap": 1000, "level": 0.90,
    "rank_members": 19, "true_params": None, "K": None,
}

_KINDS = {"gaussian": GAUSSIAN, "precip": PRECIPITATION,
          "precipitation": PRECIPITATION}


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mixpost",
        description="Post-processing of multi-source ensemble forecasts.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_, *flags):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON file of options; flags override it")
        p.add_argument("--out-dir", dest="out_dir", help="output directory")
        p.add_argument("--seed", type=int)
        for flag in flags:
            FLAGS[flag](p)
        return p

    add("fit", "estimate model parameters", "data", "kind", "lead", "em", "sem")
    add("predict", "predictive distributions and scenarios", "data", "params",
        "kind", "lead", "samples", "ecc", "sem")
    add("verify", "CRPS and rank histograms", "data", "forecasts", "kind",
        "lead", "bootstrap")
    add("exchangeability", "rank-occupancy test per member", "data", "kind",
        "lead", "source")
    add("simstudy", "simulation study", "kind", "study", "em", "sem")
    return parser


FLAGS = {
    "data": lambda p: p.add_argument("--data", help="long-format CSV"),
    "params": lambda p: p.add_argument(
        "--params", help="parameter JSON, or a directory of params_lead<h>.json"),
    "forecasts": lambda p: p.add_argument(
        "--forecasts", help="predictive/samples CSV, or a directory of them"),
    "kind": lambda p: p.add_argument("--kind", choices=sorted(_KINDS)),
    "lead": lambda p: p.add_argument("--lead", type=int,
                                     help="lead time to select (default: all)"),
    "samples": lambda p: p.add_argument("--samples", type=int,
                                        help="draws per case (precipitation)"),
    "ecc": lambda p: p.add_argument(
        "--ecc-template", dest="ecc_template",
        help="'all' or a source id: raw ensemble whose ranks order the scenarios"),
    "source": lambda p: p.add_argument("--source", type=int, help="source id"),
    "bootstrap": lambda p: (p.add_argument("--bootstrap", type=int),
                            p.add_argument("--level", type=float),
                            p.add_argument("--rank-members", dest="rank_members",
                                           type=int)),
    "em": lambda p: (p.add_argument("--epsilon", type=float),
                     p.add_argument("--max-iterations", dest="max_iterations",
                                    type=int)),
    "sem": lambda p: (p.add_argument("--sem-iterations", dest="sem_iterations",
                                     type=int),
                      p.add_argument("--gibbs-iterations", dest="gibbs_iterations",
                                     type=int),
                      p.add_argument("--forecast-iterations",
                                     dest="forecast_iterations", type=int),
                      p.add_argument("--forecast-burn-in", dest="forecast_burn_in",
                                     type=int)),
    "study": lambda p: (p.add_argument("--replications", type=int),
                        p.add_argument("--n-train", dest="n_train", type=int),
                        p.add_argument("--n-test", dest="n_test", type=int),
                        p.add_argument("--jobs", type=int)),
}


def resolve_config(args: argparse.Namespace) -> dict:
    """Defaults, then the JSON config file, then explicit flags."""
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        try:
            text = Path(args.config).read_text(encoding="utf-8")
            loaded = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{args.config}: invalid JSON: {exc}") from None
        if not isinstance(loaded, dict):
            raise ParseError(f"{args.config}: config must be a JSON object")
        unknown = set(loaded) - set(DEFAULTS)
        if unknown:
            raise ValidationError(f"unknown config keys {sorted(unknown)}")
        cfg.update(loaded)
    for key, value in vars(args).items():
        if key not in ("command", "config") and value is not None:
            cfg[key] = value
    cfg["command"] = args.command
    if cfg["kind"] not in _KINDS:
        raise ValidationError(f"unknown kind {cfg['kind']!r}")
    cfg["kind"] = _KINDS[cfg["kind"]]
    for key in ("samples", "sem_iterations", "gibbs_iterations", "replications",
                "n_train", "n_test", "jobs", "bootstrap", "rank_members",
                "max_iterations"):
        if int(cfg[key]) < 1:
            raise ValidationError(f"{key} must be >= 1")
    required = {"fit": ["data"], "predict": ["data", "params"],
                "verify": ["data", "forecasts"], "exchangeability": ["data"],
                "simstudy": []}[args.command]
    for key in required:
        if not cfg[key]:
            raise ValidationError(f"{args.command} needs --{key.replace('_', '-')}")
    return cfg


def _em_cfg(cfg):
    return EMConfig(epsilon=float(cfg["epsilon"]),
                    max_iterations=int(cfg["max_iterations"]))


def _sem_cfg(cfg, seed):
    return SEMConfig(sem_iterations=int(cfg["sem_iterations"]),
                     gibbs_inner_iterations=int(cfg["gibbs_iterations"]),
                     seed=int(seed),
                     forecast_gibbs_iterations=int(cfg["forecast_iterations"]),
                     forecast_burn_in=int(cfg["forecast_burn_in"]))


def _leads(cfg):
    """Lead times to process: ``[None]`` for a file without a lead column."""
    path = cfg["data"]
    if not Path(path).is_file():
        raise ParseError(f"{path}: no such file")
    present = read_lead_times(path)
    if cfg["lead"] is not None:
        if present and cfg["lead"] not in present:
            raise SchemaError(f"lead time {cfg['lead']} not in {path} ({present})")
        return [cfg["lead"]] if present else [None]
    return present or [None]


def _suffix(lead):
    return "" if lead is None else f"_lead{lead}"


def _load(cfg, lead, schema=None):
    return load_dataset(cfg["data"], schema=schema, kind=cfg["kind"], lead_time=lead)


# ---------------------------------------------------------------------------
# parameter files
# ---------------------------------------------------------------------------

def _write_params(path, params, data: Dataset):
    d = json.loads(params_to_json(params))
    d["sources"] = [{"source_id": s.source_id, "member_count": s.member_count}
                    for s in data.schema[1:]]
    Path(path).write_text(json.dumps(d, indent=2) + "\n", encoding="utf-8")


def _read_params(path):
    p = Path(path)
    if not p.is_file():
        raise ParseError(f"{path}: no such parameter file")
    text = p.read_text(encoding="utf-8")
    params = params_from_json(text)
    sources = json.loads(text).get("sources")
    schema = None
    if sources is not None:
        try:
            schema = [SourceSpec(int(s["source_id"]), int(s["member_count"]))
                      for s in sources]
        except (KeyError, TypeError, ValueError):
            raise ParseError(f"{path}: malformed 'sources' block") from None
    return params, schema


def _params_for(cfg, lead):
    p = Path(cfg["params"])
    if p.is_dir():
        return _read_params(p / f"params{_suffix(lead)}.json")
    return _read_params(p)


# ---------------------------------------------------------------------------
# minimal SVG
# ---------------------------------------------------------------------------

def _svg(width, height, body, title):
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
            f'height="{height}" viewBox="0 0 {width} {height}">\n'
            f'<rect width="{width}" height="{height}" fill="white"/>\n'
            f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" '
            f'font-family="sans-serif" font-size="13">{title}</text>\n'
            + "".join(body) + "</svg>\n")


def svg_bars(values, title, width=480, height=260):
    """Bar chart, one bar per value (rank histograms)."""
    values = np.asarray(values, dtype=float)
    top = max(values.max(), 1e-12)
    x0, y0, w, h = 40, 30, width - 60, height - 60
    bw = w / values.size
    body = [f'<line x1="{x0}" y1="{y0 + h}" x2="{x0 + w}" y2="{y0 + h}" stroke="black"/>\n']
    for i, v in enumerate(values):
        bh = h * v / top
        body.append(f'<rect x="{x0 + i * bw + 1:.2f}" y="{y0 + h - bh:.2f}" '
                    f'width="{max(bw - 2, 0.5):.2f}" height="{bh:.2f}" fill="#4a7ab5"/>\n')
    flat = y0 + h - h * values.mean() / top
    body.append(f'<line x1="{x0}" y1="{flat:.2f}" x2="{x0 + w}" y2="{flat:.2f}" '
                'stroke="#c03030" stroke-dasharray="4,3"/>\n')
    return _svg(width, height, body, title)


def svg_lines(x, series: dict, title, width=520, height=300):
    """Line chart of several named series over a shared x axis."""
    x = np.asarray(x, dtype=float)
    allv = np.concatenate([np.asarray(v, float) for v in series.values()])
    lo, hi = float(allv.min()), float(allv.max())
    if hi <= lo:
        hi = lo + 1.0
    xl, xh = float(x.min()), float(x.max())
    if xh <= xl:
        xh = xl + 1.0
    x0, y0, w, h = 50, 30, width - 170, height - 70
    palette = ["#4a7ab5", "#c03030", "#3a9a4a", "#9a5ab5", "#d08a20", "#555555"]

    def px(v):
        return x0 + w * (v - xl) / (xh - xl)

    def py(v):
        return y0 + h - h * (v - lo) / (hi - lo)

    body = [f'<line x1="{x0}" y1="{y0 + h}" x2="{x0 + w}" y2="{y0 + h}" stroke="black"/>\n',
            f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y0 + h}" stroke="black"/>\n',
            f'<text x="{x0 - 4}" y="{y0 + 4}" text-anchor="end" font-size="10" '
            f'font-family="sans-serif">{hi:.3g}</text>\n',
            f'<text x="{x0 - 4}" y="{y0 + h}" text-anchor="end" font-size="10" '
            f'font-family="sans-serif">{lo:.3g}</text>\n']
    for i, (name, vals) in enumerate(series.items()):
        col = palette[i % len(palette)]
        pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x, vals))
        body.append(f'<polyline points="{pts}" fill="none" stroke="{col}" stroke-width="2"/>\n')
        for a, b in zip(x, vals):
            body.append(f'<circle cx="{px(a):.2f}" cy="{py(b):.2f}" r="3" fill="{col}"/>\n')
        body.append(f'<text x="{x0 + w + 10}" y="{y0 + 14 * i + 10}" fill="{col}" '
                    f'font-size="11" font-family="sans-serif">{name}</text>\n')
    return _svg(width, height, body, title)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_fit(cfg, out: Path):
    for lead in _leads(cfg):
        data = _load(cfg, lead)
        sfx = _suffix(lead)
        if cfg["kind"] == GAUSSIAN:
            params, trace = fit_em(data, _em_cfg(cfg))
        else:
            data.require_observations()
            transform = fit_power_transform(data.observations)
            params, trace = sem_fit(data, _sem_cfg(cfg, cfg["seed"]), transform,
                                    em_cfg=_em_cfg(cfg))
        _write_params(out / f"params{sfx}.json", params, data)
        trace.write_csv(out / f"trace{sfx}.csv")
        print(f"lead {lead if lead is not None else '-'}: {len(data)} cases, "
              f"{trace.n_iterations} iterations ({trace.termination})")


def _check_model(cfg, params):
    want = TobitParams if cfg["kind"] == PRECIPITATION else GammaNormalParams
    if not isinstance(params, want):
        raise SchemaError(f"--kind {cfg['kind']} needs {want.__name__}, "
                          f"parameter file holds {type(params).__name__}")


def _template(data: Dataset, spec):
    if spec in (None, "all"):
        return data.members
    try:
        sid = int(spec)
    except ValueError:
        raise ValidationError(f"--ecc-template must be 'all' or a source id, got {spec!r}") from None
    if sid not in data.layout.source_ids[1:]:
        raise SchemaError(f"ECC template source {sid} not in the data")
    return data.source_members(data.layout.source_ids.index(sid))


def cmd_predict(cfg, out: Path):
    leads = _leads(cfg)
    M_samples = int(cfg["samples"])
    ecc = cfg["ecc_template"] is not None
    per_lead = {}
    for h, lead in enumerate(leads):
        params, schema = _params_for(cfg, lead)
        _check_model(cfg, params)
        data = _load(cfg, lead, schema)
        if data.n_sources != (params.base if isinstance(params, TobitParams)
                              else params).n_sources:
            raise SchemaError("parameter file and data have different sources")
        sfx = _suffix(lead)
        lead_seed = [int(cfg["seed"]), h]
        if isinstance(params, TobitParams):
            scfg = _sem_cfg(cfg, cfg["seed"])
            draws = forecast_sample_batch(params, data, M_samples, scfg,
                                          np.random.default_rng(lead_seed))
            write_forecast_samples(out / f"samples{sfx}.csv", data.times, draws)
        else:
            loc, scale, dof = predict_student_batch(params, data)
            with open(out / f"predictive{sfx}.csv", "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["time", "location", "scale", "dof"])
                for t, a, b in zip(data.times, loc, scale):
                    w.writerow([int(t), repr(float(a)), repr(float(b)), repr(float(dof))])
        if ecc:
            raw = _template(data, cfg["ecc_template"])
            M = raw.shape[1]
            if isinstance(params, TobitParams):
                big = forecast_sample_batch(params, data, max(20 * M, M_samples), scfg,
                                            np.random.default_rng(lead_seed + [1]))
                q = np.quantile(big, mid_quantile_levels(M), axis=1).T
            else:
                from scipy import stats
                levels = mid_quantile_levels(M)
                q = loc[:, None] + scale[:, None] * stats.t.ppf(levels, dof)[None, :]
            per_lead[lead] = {int(t): (q[i], raw[i]) for i, t in enumerate(data.times)}
    if ecc:
        common = sorted(set.intersection(*(set(v) for v in per_lead.values())))
        sdir = out / "scenarios"
        sdir.mkdir()
        labels = [0 if lead is None else lead for lead in leads]
        for t in common:
            qf = QuantileForecast(np.array([per_lead[lead][t][0] for lead in leads]),
                                  tuple(labels))
            raw = np.column_stack([per_lead[lead][t][1] for lead in leads])
            ecc_q(qf, raw).write_csv(sdir / f"time_{t}.csv")
    print(f"predicted {len(leads)} lead time(s)")


_FORECAST_NAME = re.compile(r"^(predictive|samples)(?:_lead(\d+))?\.csv$")


def _read_forecasts(path):
    """Map time -> ('student', (loc, scale, dof)) or ('sample', draws)."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        rows = [r for r in reader if r]
    out = {}
    try:
        if header == ["time", "location", "scale", "dof"]:
            for r in rows:
                out[int(r[0])] = ("student", tuple(float(v) for v in r[1:4]))
        elif header == ["time", "draw_index", "value"]:
            acc = {}
            for r in rows:
                acc.setdefault(int(r[0]), []).append((int(r[1]), float(r[2])))
            for t, vals in acc.items():
                out[t] = ("sample", np.array([v for _, v in sorted(vals)]))
        else:
            raise ParseError(f"{path}: unrecognised forecast header {header}")
    except (ValueError, IndexError) as exc:
        raise ParseError(f"{path}: {exc}") from None
    return out


def _forecast_files(cfg, leads):
    p = Path(cfg["forecasts"])
    if p.is_file():
        if len(leads) > 1:
            raise ValidationError("several lead times need a forecast directory")
        return {leads[0]: p}
    if not p.is_dir():
        raise ParseError(f"{p}: no such forecast file or directory")
    files = {}
    for f in sorted(p.iterdir()):
        m = _FORECAST_NAME.match(f.name)
        if m:
            lead = None if m.group(2) is None else int(m.group(2))
            files[lead] = f
    missing = [lead for lead in leads if lead not in files]
    if missing:
        raise ParseError(f"{p}: no forecast file for lead time(s) {missing}")
    return {lead: files[lead] for lead in leads}


def cmd_verify(cfg, out: Path):
    leads = _leads(cfg)
    files = _forecast_files(cfg, leads)
    rng = np.random.default_rng(int(cfg["seed"]))
    B, level, R = int(cfg["bootstrap"]), float(cfg["level"]), int(cfg["rank_members"])
    rows, curves = [], {}
    for lead in leads:
        data = _load(cfg, lead)
        fc = _read_forecasts(files[lead])
        observed = {int(t) for t, y in zip(data.times, data.observations) if not np.isnan(y)}
        bad = sorted(set(fc) ^ observed)
        if bad:
            raise ValidationError(f"lead {lead}: forecasts and observations are "
                                  f"misaligned at time index(es) {bad}")
        keep = np.array([int(t) in observed for t in data.times])
        data = data.subset(keep)
        y = data.observations
        kinds = {fc[int(t)][0] for t in data.times}
        if kinds == {"student"}:
            loc, scale, dof = np.array([fc[int(t)][1] for t in data.times]).T
            crps = crps_student(loc, scale, dof, y)
            ens = loc[:, None] + scale[:, None] * rng.standard_t(dof[:, None], (len(y), R))
        else:
            sizes = {fc[int(t)][1].size for t in data.times}
            if len(sizes) != 1:
                raise ValidationError("sample forecasts need the same size for every case")
            draws = np.array([fc[int(t)][1] for t in data.times])
            crps = crps_sample_batch(draws, y)
            idx = np.round(np.linspace(0, draws.shape[1] - 1, min(R, draws.shape[1])))
            ens = draws[:, idx.astype(int)]
        methods = {"forecast": (crps, ens)}
        for e in range(1, data.n_sources + 1):
            mem = data.source_members(e)
            methods[f"raw_{data.layout.source_ids[e]}"] = (crps_sample_batch(mem, y), mem)
        sfx = _suffix(lead)
        for name, (scores, ens) in methods.items():
            rep = score_report(scores, B, level, rng)
            rows.append((0 if lead is None else lead, name, rep))
            curves.setdefault(name, []).append(rep.mean_crps)
            hist = RankHistogram.from_ranks(observation_ranks(ens, y, rng), ens.shape[1])
            write_histogram_csv(out / f"hist_{name}{sfx}.csv", hist)
            (out / f"hist_{name}{sfx}.svg").write_text(
                svg_bars(hist.bin_counts, f"rank histogram: {name}"), encoding="utf-8")
    write_score_csv(out / "scores.csv", rows)
    x = [0 if lead is None else lead for lead in leads]
    (out / "crps.svg").write_text(svg_lines(x, curves, "mean CRPS by lead time"),
                                  encoding="utf-8")
    for lead, name, rep in rows:
        print(f"lead {lead} {name:>12}: CRPS {rep.mean_crps:.4f} "
              f"[{rep.bootstrap_lo:.4f}, {rep.bootstrap_hi:.4f}]")


def cmd_exchangeability(cfg, out: Path):
    rng = np.random.default_rng(int(cfg["seed"]))
    for lead in _leads(cfg):
        data = _load(cfg, lead)
        if cfg["source"] is not None:
            sources = [int(cfg["source"])]
        else:
            sources = [s.source_id for s in data.schema[1:] if s.member_count > 1]
            if not sources:
                raise ValidationError("no source with two or more members")
        with open(out / f"exchangeability{_suffix(lead)}.csv", "w", newline="",
                  encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["source_id", "member_id", "p_value"])
            for sid in sources:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", RuntimeWarning)
                    pv = exchangeability_rank_test(data, sid, rng)
                for k, p in enumerate(pv, start=1):
                    w.writerow([sid, k, repr(float(p))])
                print(f"lead {lead if lead is not None else '-'} source {sid}: "
                      f"min p = {pv.min():.3g}")


def cmd_simstudy(cfg, out: Path):
    base = STUDY_PARAMS
    if cfg["true_params"] is not None:
        base = GammaNormalParams.from_dict(cfg["true_params"])
    K = tuple(cfg["K"]) if cfg["K"] is not None else STUDY_K
    truth = TobitParams(base) if cfg["kind"] == PRECIPITATION else base
    study = StudyConfig(true_params=truth, K=K, n_train=int(cfg["n_train"]),
                        n_test=int(cfg["n_test"]),
                        replications=int(cfg["replications"]),
                        seed=int(cfg["seed"]), sem=_sem_cfg(cfg, 0),
                        em=_em_cfg(cfg), n_jobs=int(cfg["jobs"]))
    report = run_simulation_study(study)
    report.write(out)
    table = report.crps_table()
    if table:
        names = list(table)
        (out / "crps.svg").write_text(
            svg_bars([np.mean(table[n]) for n in names],
                     "mean CRPS: " + ", ".join(names)), encoding="utf-8")
    print(f"{report.n_ok}/{study.replications} replications succeeded")
    for name, v in table.items():
        print(f"{name:>12}: mean CRPS {np.mean(v):.4f}")
    for m in ("oracle", "prediction"):
        print(f"{m:>12}: median coverage Z {report.median_coverage(m, 'Z'):.3f}, "
              f"omega2 {report.median_coverage(m, 'omega2'):.3f}")


COMMANDS = {"fit": cmd_fit, "predict": cmd_predict, "verify": cmd_verify,
            "exchangeability": cmd_exchangeability, "simstudy": cmd_simstudy}


def _publish(stage: Path, out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    for item in sorted(stage.iterdir()):
        target = out_dir / item.name
        if target.is_dir():
            shutil.rmtree(target)
        shutil.move(str(item), str(target))


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    stage = None
    try:
        cfg = resolve_config(args)
        out_dir = Path(cfg["out_dir"])
        stage = Path(tempfile.mkdtemp(prefix=".mixpost-"))
        COMMANDS[cfg["command"]](cfg, stage)
        _publish(stage, out_dir)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (NumericalError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    finally:
        if stage is not None and stage.exists():
            shutil.rmtree(stage, ignore_errors=True)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

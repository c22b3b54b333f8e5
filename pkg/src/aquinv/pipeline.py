"""Experiment stages: training image, CAAE, truth, surrogate dataset and training, inversion, reports.

Every stage reads and writes a run directory::

    ti/volume.zten                      training-image volume
    patches/{train,test}.zten           CAAE patches
    caae/                               decoder checkpoint + history.json
    truth/                              truth lnK, source, clean and noisy data
    dataset/                            autoregressive surrogate pairs
    surrogate/                          DenseED checkpoint + history.json
    invert_<forward>/                   ensembles, reports, posterior fields
    manifest.json                       config hash, seeds, artifacts, timings
"""
from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import io
from .caae import CAAE, facies_fraction, train_caae
from .config import ExperimentConfig
from .densed import DenseED, NormalizationSpec, Surrogate, make_pairs, rmse, SurrogateDataset, \
    train_surrogate
from .errors import ConfigError, MissingArtifactError
from .esmda import run_esmda
from .forward import simulate
from .geology import extract_patches, load_training_volume, synth_training_volume
from .observations import ObservationSet, add_noise, observe, observe_batch

log = logging.getLogger(__name__)

FORWARDS = ("pde", "surrogate")
BOX_FIELDS = ["parameter", "iteration", "mean", "std", "min", "q025", "q25", "median", "q75", "q975", "max",
              "truth"]


# ---------------------------------------------------------------------------
# run directory bookkeeping

class RunDir:
    """Paths of a run plus its manifest of artifacts, seeds and timings."""

    def __init__(self, root, cfg=None):
        self.root = Path(root)
        self.cfg = cfg

    def path(self, *parts):
        return self.root.joinpath(*parts)

    @property
    def manifest_path(self):
        return self.path("manifest.json")

    def manifest(self):
        if self.manifest_path.exists():
            return io.read_json(self.manifest_path)
        return {"artifacts": {}, "timings": {}}

    def register(self, stage, paths, seconds=None):
        man = self.manifest()
        if self.cfg is not None:
            man["config_hash"] = io.config_hash(self.cfg.to_dict())
            man["config"] = self.cfg.to_dict()
            man["seeds"] = self.cfg.seeds()
        man["artifacts"][stage] = [str(Path(p).relative_to(self.root)) for p in paths]
        if seconds is not None:
            man["timings"][stage] = round(float(seconds), 3)
        io.write_json(self.manifest_path, man)

    def require(self, *parts):
        p = self.path(*parts)
        if not p.exists():
            raise MissingArtifactError(f"missing artifact {p}; run the producing stage first")
        return p


def _timed(fn):
    def wrapper(cfg, run, *args, **kwargs):
        if not isinstance(run, RunDir):
            run = RunDir(run, cfg)
        run.cfg = cfg
        t0 = time.perf_counter()
        out, paths = fn(cfg, run, *args, **kwargs)
        run.register(fn.__name__, paths, time.perf_counter() - t0)
        return out
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def parallel_map(fn, items, threads=1):
    """Map ``fn`` over ``items``, in worker processes when ``threads > 1``; order is preserved."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# training image and CAAE

@_timed
def synth_ti(cfg, run):
    """Synthesise (or load) the training-image volume."""
    t = cfg.ti
    if t.path:
        vol = load_training_volume(t.path)
    else:
        vol = synth_training_volume(t.dims, tuple(t.facies), t.proportion, tuple(t.corr_len),
                                    cfg.stage_seed("ti"))
    p = io.write_tensor(run.path("ti", "volume.zten"), vol, {"facies": t.facies, "source": t.path or "synthetic"})
    return vol, [p]


@_timed
def extract(cfg, run):
    """Cut CAAE training patches from the top and test patches from the bottom of the volume."""
    vol = io.read_tensor(run.require("ti", "volume.zten"))
    train, test = extract_patches(vol, cfg.grid3().shape, cfg.caae.n_train, cfg.caae.n_test, cfg.ti.split,
                                  cfg.stage_seed("patches"))
    paths = [io.write_tensor(run.path("patches", "train.zten"), train.astype(np.float32)),
             io.write_tensor(run.path("patches", "test.zten"), test.astype(np.float32))]
    return (train, test), paths


def facies_threshold(cfg):
    return 0.5 * (cfg.ti.facies[0] + cfg.ti.facies[1])


@_timed
def train_caae_stage(cfg, run, on_epoch=None):
    """Train the CAAE on the stored patches and checkpoint the model."""
    torch.set_num_threads(cfg.threads)
    train = io.read_tensor(run.require("patches", "train.zten"))
    test = io.read_tensor(run.require("patches", "test.zten"))
    c = cfg.caae
    spec = cfg.caae_spec()
    model, hist = train_caae(train, spec, c.epochs, c.lr, c.batch_size, cfg.stage_seed("caae"),
                             test_patches=test[:256] if len(test) else None, on_epoch=on_epoch)
    z = np.random.default_rng(cfg.stage_seed("caae")).standard_normal((min(256, len(train)), spec.n_latent))
    thr = facies_threshold(cfg)
    stats = dict(train_facies_fraction=facies_fraction(train, thr),
                 decoded_facies_fraction=facies_fraction(model.decode_numpy(z), thr))
    manifest = io.save_module(run.path("caae"), model, dict(kind="caae", spec=spec.to_dict(),
                                                            grid_shape=list(spec.grid_shape), stats=stats))
    p = io.write_json(run.path("caae", "history.json"), dict(hist.to_dict(), **stats))
    return (model, hist), [run.path("caae", "manifest.json"), p]


def _check_shape(manifest, cfg, what):
    if tuple(manifest["grid_shape"]) != cfg.grid3().shape:
        raise ConfigError(f"{what} checkpoint was trained on grid {tuple(manifest['grid_shape'])}, "
                          f"config uses {cfg.grid3().shape}")


def load_caae(cfg, run):
    run = run if isinstance(run, RunDir) else RunDir(run, cfg)
    run.require("caae", "manifest.json")
    manifest = io.load_manifest(run.path("caae"))
    _check_shape(manifest, cfg, "CAAE")
    model = CAAE(cfg.caae_spec())
    io.load_module(run.path("caae"), model)
    model.eval()
    return model


# ---------------------------------------------------------------------------
# truth

@_timed
def make_truth(cfg, run):
    """Truth lnK from the held-out region, reference source, clean and corrupted data."""
    vol = io.read_tensor(run.require("ti", "volume.zten"))
    grid = cfg.grid3()
    seed = cfg.stage_seed("truth")
    _, test = extract_patches(vol, grid.shape, 0, 1, cfg.ti.split, seed)
    lnk = test[0]
    src = cfg.truth_source()
    wells = cfg.well_network().validate(grid)
    snaps, h = simulate(np.exp(lnk), src, cfg.transport_params(), cfg.flow_bcs(), grid,
                        cfg.observation_times(), cfg.solver_options())
    clean = observe(snaps, h, wells)
    noise = cfg.noise_model()
    noisy = add_noise(clean, noise.variances(wells), cfg.stage_seed("noise"))
    paths = [
        io.write_tensor(run.path("truth", "lnk.zten"), lnk),
        io.write_tensor(run.path("truth", "snapshots.zten"), snaps),
        io.write_tensor(run.path("truth", "head.zten"), h),
        io.write_tensor(run.path("truth", "d_clean.zten"), clean.d, {"tag": clean.tag}),
        io.write_tensor(run.path("truth", "d_obs.zten"), noisy.d, {"tag": noisy.tag}),
        io.write_json(run.path("truth", "source.json"),
                      dict(sl=[src.sl_x, src.sl_y], ss=list(src.strengths), layer=src.layer, q_s=src.q_s,
                           period_len=src.period_len)),
    ]
    wells.write_csv(run.path("truth", "wells.csv"))
    paths.append(run.path("truth", "wells.csv"))
    return dict(lnk=lnk, source=src, clean=clean, noisy=noisy, snapshots=snaps, head=h), paths


def load_observations(run):
    run = run if isinstance(run, RunDir) else RunDir(run)
    d, meta = io.read_tensor(run.require("truth", "d_obs.zten"), with_meta=True)
    return ObservationSet(d, meta.get("tag", "corrupted"))


# ---------------------------------------------------------------------------
# surrogate dataset and training

@dataclass
class _SimJob:
    lnk: np.ndarray
    src: object
    cfg: ExperimentConfig


def _simulate_job(job):
    cfg = job.cfg
    return simulate(np.exp(job.lnk), job.src, cfg.transport_params(), cfg.flow_bcs(), cfg.grid3(),
                    cfg.observation_times(), cfg.solver_options())


def sources_from_parameters(cfg, M):
    """Source configurations for every column of a packed parameter block."""
    lay = cfg.layout()
    tmpl = cfg.source_template()
    z, sl, ss = lay.unpack(M)
    return z, [tmpl.with_parameters(sl[:, n], ss[:, n]) for n in range(M.shape[1])]


@_timed
def generate_dataset(cfg, run):
    """Simulate ``n_train + n_test`` prior realisations and store autoregressive pairs."""
    decoder = load_caae(cfg, run)
    s = cfg.surrogate
    n = s.n_train + s.n_test
    prior = cfg.prior_spec()
    M = prior.sample(n, np.random.default_rng(cfg.stage_seed("dataset")))
    z, sources = sources_from_parameters(cfg, M)
    lnk = decoder.decode_numpy(z.T)
    results = parallel_map(_simulate_job, [_SimJob(k, src, cfg) for k, src in zip(lnk, sources)], cfg.threads)
    snaps = np.stack([r[0] for r in results])
    heads = np.stack([r[1] for r in results])
    ds = make_pairs(lnk, sources, snaps, heads, cfg.observation_times(), cfg.grid3())
    paths = []
    for name in ("inputs", "outputs"):
        paths.append(io.write_tensor(run.path("dataset", f"{name}.zten"), getattr(ds, name).astype(np.float32)))
    for name in ("run", "step", "cells"):
        paths.append(io.write_tensor(run.path("dataset", f"{name}.zten"), getattr(ds, name).astype(np.float64)))
    paths.append(io.write_tensor(run.path("dataset", "parameters.zten"), M))
    paths.append(io.write_json(run.path("dataset", "meta.json"),
                               dict(n_train=s.n_train, n_test=s.n_test, n_pairs=len(ds),
                                    times=cfg.observation_times(), seed=cfg.stage_seed("dataset"))))
    return ds, paths


def load_dataset(run):
    run = run if isinstance(run, RunDir) else RunDir(run)
    arrays = {name: io.read_tensor(run.require("dataset", f"{name}.zten"))
              for name in ("inputs", "outputs", "run", "step", "cells")}
    meta = io.read_json(run.require("dataset", "meta.json"))
    ds = SurrogateDataset(arrays["inputs"].astype(np.float64), arrays["outputs"].astype(np.float64),
                          arrays["run"].astype(int), arrays["step"].astype(int), arrays["cells"].astype(int))
    return ds, meta


def normalization_for(cfg, train):
    lnk = train.inputs[:, 2]
    return NormalizationSpec(c_ref=cfg.surrogate.c_ref, s_ref=cfg.source.q_s * cfg.prior.ss_upper,
                             lnk_mean=float(lnk.mean()), lnk_std=float(max(lnk.std(), 1e-6)),
                             h_ref=cfg.surrogate.h_ref)


@_timed
def train_surrogate_stage(cfg, run, on_epoch=None):
    """Train DenseED on the stored dataset (first ``n_train`` runs) and checkpoint it."""
    torch.set_num_threads(cfg.threads)
    ds, meta = load_dataset(run)
    n_train = meta["n_train"]
    train = ds.subset(np.arange(n_train))
    test = ds.subset(np.arange(n_train, meta["n_train"] + meta["n_test"]))
    norm = normalization_for(cfg, train)
    s = cfg.surrogate
    times = cfg.observation_times()
    sur, hist = train_surrogate(train, test, cfg.densed_spec(), norm, cfg.grid3(), cfg.well_network().sensors,
                                times[0], times, s.epochs, s.lr, s.batch_size, cfg.stage_seed("surrogate"),
                                s.lam, s.mask_weight, on_epoch=on_epoch)
    io.save_module(run.path("surrogate"), sur.net,
                   dict(kind="densed", spec=cfg.densed_spec().to_dict(), grid_shape=list(cfg.grid3().shape),
                        normalization=norm.to_dict(), dt=sur.dt, times=list(sur.times)))
    p = io.write_json(run.path("surrogate", "history.json"), hist.to_dict())
    return (sur, hist), [run.path("surrogate", "manifest.json"), p]


def load_surrogate(cfg, run):
    run = run if isinstance(run, RunDir) else RunDir(run, cfg)
    run.require("surrogate", "manifest.json")
    manifest = io.load_manifest(run.path("surrogate"))
    _check_shape(manifest, cfg, "surrogate")
    net = DenseED(cfg.densed_spec())
    io.load_module(run.path("surrogate"), net)
    net.eval()
    times = cfg.observation_times()
    if abs(manifest["dt"] - times[0]) > 1e-9 * times[0]:
        raise ConfigError(f"surrogate trained with interval {manifest['dt']} d, config uses {times[0]} d")
    return Surrogate(net, NormalizationSpec(**manifest["normalization"]), manifest["dt"], manifest["times"])


# ---------------------------------------------------------------------------
# inversion

class ForwardMap:
    """``g(m)``: decode latent vectors, run the simulator or surrogate, gather sensor data."""

    def __init__(self, cfg, decoder, kind, surrogate=None):
        if kind not in FORWARDS:
            raise ConfigError(f"unknown forward model {kind!r}")
        if kind == "surrogate" and surrogate is None:
            raise MissingArtifactError("surrogate forward requested without a trained surrogate")
        self.cfg, self.decoder, self.kind, self.surrogate = cfg, decoder, kind, surrogate
        self.grid = cfg.grid3()
        self.wells = cfg.well_network()
        self.calls = 0

    def fields(self, M):
        z, sources = sources_from_parameters(self.cfg, M)
        return self.decoder.decode_numpy(z.T), sources

    def __call__(self, M):
        M = np.atleast_2d(np.asarray(M, float))
        lnk, sources = self.fields(M)
        self.calls += M.shape[1]
        if self.kind == "surrogate":
            snaps, head = self.surrogate.rollout(lnk, sources, self.grid, self.cfg.observation_times())
            return observe_batch(snaps, head, self.wells)
        jobs = [_SimJob(k, src, self.cfg) for k, src in zip(lnk, sources)]
        cols = []
        for res in parallel_map(_safe_simulate_job, jobs, self.cfg.threads):
            if res is None:
                cols.append(np.full(self.wells.n_data, np.nan))
            else:
                cols.append(observe(res[0], res[1], self.wells).d)
        return np.stack(cols, axis=1)


def _safe_simulate_job(job):
    try:
        return _simulate_job(job)
    except (ArithmeticError, RuntimeError, ValueError) as exc:
        log.warning("forward simulation failed: %s", exc)
        return None


def forward_budget(cfg):
    """Forward evaluations an inversion schedules: ``N_e * (N_a + 1)``."""
    return cfg.esmda.n_e * (cfg.schedule().n_a + 1)


def _boxplot_rows(cfg, ensembles, truth_m):
    lay = cfg.layout()
    names = ["sl_x", "sl_y"] + [f"ss_{p + 1}" for p in range(lay.n_re)]
    offset = lay.sl_slice.start
    rows = []
    for it, M in enumerate(ensembles):
        for n, name in enumerate(names):
            v = M[offset + n]
            q = np.quantile(v, [0.025, 0.25, 0.5, 0.75, 0.975])
            rows.append(dict(parameter=name, iteration=it, mean=v.mean(), std=v.std(ddof=1), min=v.min(),
                             q025=q[0], q25=q[1], median=q[2], q75=q[3], q975=q[4], max=v.max(),
                             truth=truth_m[offset + n] if truth_m is not None else float("nan")))
    return rows


def summarize(cfg, result, d, decoder, truth_lnk=None, truth_src=None):
    """Posterior diagnostics compared with the prior ensemble."""
    lay = cfg.layout()
    prior, post = result.ensembles[0], result.final
    out = {"n_forward": result.n_forward, "n_e": prior.shape[1], "n_a": len(result.reports)}
    lnk_prior = decoder.decode_numpy(prior[lay.z_slice].T)
    lnk_post = decoder.decode_numpy(post[lay.z_slice].T)
    fields = dict(prior_lnk_mean=lnk_prior.mean(0), posterior_lnk_mean=lnk_post.mean(0),
                  posterior_lnk_std=lnk_post.std(0, ddof=1))
    ss_prior_std = prior[lay.ss_slice].std(axis=1, ddof=1)
    ss_post_std = post[lay.ss_slice].std(axis=1, ddof=1)
    out["ss_std_ratio"] = (ss_post_std / ss_prior_std).tolist()
    out["posterior_sl_mean"] = post[lay.sl_slice].mean(axis=1).tolist()
    out["posterior_ss_mean"] = post[lay.ss_slice].mean(axis=1).tolist()
    if truth_src is not None:
        sl_true = np.array([truth_src.sl_x, truth_src.sl_y])
        out["prior_location_error"] = float(np.linalg.norm(prior[lay.sl_slice].mean(axis=1) - sl_true))
        out["posterior_location_error"] = float(np.linalg.norm(post[lay.sl_slice].mean(axis=1) - sl_true))
        g = cfg.grid3()
        out["cell_width"] = float(max(g.dx, g.dy))
    if truth_lnk is not None:
        out["prior_lnk_rmse"] = rmse(fields["prior_lnk_mean"], truth_lnk)
        out["posterior_lnk_rmse"] = rmse(fields["posterior_lnk_mean"], truth_lnk)
    out["final_mismatch"] = float(np.mean(np.linalg.norm(result.predictions[-1] - np.asarray(d)[:, None], axis=0)))
    return out, fields


def invert(cfg, run, forward="surrogate", observations=None, forward_fn=None, decoder=None, write=True):
    """Run CAAE-parameterised ESMDA with the PDE model or the surrogate as ``g``.

    ``forward_fn`` replaces the composed forward map (used for budget checks);
    results are written to ``invert_<forward>/`` with a schema independent of
    the forward model.  Returns ``(EsmdaResult, summary)``.
    """
    run = run if isinstance(run, RunDir) else RunDir(run, cfg)
    run.cfg = cfg
    t0 = time.perf_counter()
    if forward not in FORWARDS:
        raise ConfigError(f"unknown forward model {forward!r}")
    torch.set_num_threads(cfg.threads)
    wells = cfg.well_network().validate(cfg.grid3())
    if observations is None:
        observations = load_observations(run)
    d = observations.d if isinstance(observations, ObservationSet) else np.asarray(observations, float)
    if len(d) != wells.n_data:
        raise ConfigError(f"observation vector has {len(d)} entries, well network expects {wells.n_data}")
    if forward_fn is None:
        decoder = decoder or load_caae(cfg, run)
        surrogate = load_surrogate(cfg, run) if forward == "surrogate" else None
        forward_fn = ForwardMap(cfg, decoder, forward, surrogate)
    prior = cfg.prior_spec()
    M0 = prior.sample(cfg.esmda.n_e, np.random.default_rng(cfg.stage_seed("prior")))
    cov = cfg.noise_model().variances(wells)
    result = run_esmda(M0, forward_fn, cfg.schedule(), d, cov, cfg.stage_seed("esmda"), prior, cfg.esmda.energy)
    seconds = time.perf_counter() - t0
    if not write:
        return result, {"n_forward": result.n_forward, "seconds": seconds}
    out_dir = run.path(f"invert_{forward}")
    truth_lnk = io.read_tensor(run.path("truth", "lnk.zten")) if run.path("truth", "lnk.zten").exists() else None
    truth_src = cfg.truth_source()
    summary, fields = summarize(cfg, result, d, decoder, truth_lnk, truth_src)
    summary["forward"] = forward
    summary["seconds"] = seconds
    truth_m = cfg.layout().pack(np.zeros(cfg.layout().n_latent), [truth_src.sl_x, truth_src.sl_y],
                                truth_src.strengths)
    paths = []
    for it, M in enumerate(result.ensembles):
        paths.append(io.write_tensor(out_dir / f"ensemble_{it:02d}.zten", M, {"iteration": it}))
    paths.append(io.write_tensor(out_dir / "predictions_final.zten", result.predictions[-1]))
    for name, arr in fields.items():
        paths.append(io.write_tensor(out_dir / f"{name}.zten", arr))
    lay = cfg.layout()
    rows = [rep.row(lay) for rep in result.reports]
    final = result.predictions[-1]
    rows.append(dict(iteration=len(result.reports) + 1, alpha=float("nan"),
                     mismatch=float(np.mean(np.linalg.norm(final - d[:, None], axis=0))), rank=-1,
                     spread_z=float(result.final[lay.z_slice].std(axis=1, ddof=1).mean()),
                     spread_sl=float(result.final[lay.sl_slice].std(axis=1, ddof=1).mean()),
                     spread_ss=float(result.final[lay.ss_slice].std(axis=1, ddof=1).mean())))
    paths.append(io.write_csv(out_dir / "iterations.csv", rows))
    paths.append(io.write_csv(out_dir / "boxplot.csv", _boxplot_rows(cfg, result.ensembles, truth_m), BOX_FIELDS))
    paths.append(io.write_json(out_dir / "summary.json", summary))
    run.register(f"invert_{forward}", paths, seconds)
    return result, summary


# ---------------------------------------------------------------------------
# reports

def report(run_root):
    """Posterior tables, iteration traces and layer slices for every inversion in a run."""
    root = Path(run_root)
    if not root.is_dir():
        raise MissingArtifactError(f"run directory {root} does not exist")
    inversions = sorted(p for p in root.glob("invert_*") if p.is_dir())
    if not inversions:
        raise MissingArtifactError(f"no inversion results under {root}")
    written = []
    for inv in inversions:
        out = root / "report" / inv.name.removeprefix("invert_")
        box = io.read_csv(inv / "boxplot.csv")
        last = max(int(r["iteration"]) for r in box)
        stats = [r for r in box if int(r["iteration"]) in (0, last)]
        written.append(io.write_csv(out / "posterior_stats.csv", stats, BOX_FIELDS))
        written.append(io.write_csv(out / "iterations.csv", io.read_csv(inv / "iterations.csv")))
        for name in ("posterior_lnk_mean", "posterior_lnk_std", "prior_lnk_mean"):
            field = io.read_tensor(inv / f"{name}.zten")
            for k in range(field.shape[2]):
                rows = field[:, :, k].tolist()
                written.append(io.write_csv(out / f"{name}_layer{k}.csv", rows,
                                            [f"j{j}" for j in range(field.shape[1])]))
        summary = io.read_json(inv / "summary.json")
        written.append(io.write_json(out / "summary.json", summary))
    return written

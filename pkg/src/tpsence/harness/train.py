"""Training loop, translation, evaluation and the ablation driver."""
from __future__ import annotations

import json
import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .. import losses as L
from .. import metrics
from .. import models as M
from .. import substrate as S
from ..semantic import ScoreCache
from ..substrate import Tensor
from ..synthdata import DatasetManifest, DomainItem, load_image_folder, load_split, save_image
from . import checkpoint as ckpt
from .config import TrainConfig

log = logging.getLogger(__name__)

LOG_TERMS = ("loss_d", "loss_gan", "loss_nce", "loss_geom", "loss_total", "segment_distance", "semantic")


class TrainingError(RuntimeError):
    pass


class Adam:
    def __init__(self, params: dict[str, Tensor], beta1: float, beta2: float, eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainResult:
    networks: M.Networks
    digest: bytes
    history: list[dict] = field(default_factory=list)

    def flat(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.networks.all().items()}


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream])


def _chw(image: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(image.transpose(2, 0, 1))


def _crop(item: DomainItem, size: int, rng: np.random.Generator) -> np.ndarray:
    h, w = item.image.shape[:2]
    if h < size or w < size:
        raise TrainingError(f"{item.name}: image {h}×{w} smaller than crop {size}")
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    return _chw(item.image[top:top + size, left:left + size])


def _frozen(params: M.Params) -> M.Params:
    return {k: Tensor(v.data) for k, v in params.items()}


def _check_finite(terms: dict[str, float]) -> None:
    for name, value in terms.items():
        if not math.isfinite(value):
            raise TrainingError(f"non-finite value in {name}: {value}")


@contextmanager
def _term(name: str):
    try:
        yield
    except S.NonFiniteError as exc:
        raise TrainingError(f"non-finite value in {name}: {exc}") from exc


def load_training_data(cfg: TrainConfig):
    if not cfg.manifest:
        raise TrainingError("config has no manifest path")
    manifest = DatasetManifest.read(cfg.manifest)
    need_seg = cfg.loss_config().nce_variant.startswith("sence")
    clear = load_split(manifest, "trainA", need_seg, cfg.num_classes)
    rainy = load_split(manifest, "trainB", need_seg, cfg.num_classes)
    if not clear or not rainy:
        raise TrainingError("trainA and trainB must both be non-empty")
    return clear, rainy


def generator_step_terms(net: M.Networks, mcfg: M.ModelConfig, lcfg: L.LossConfig,
                         x: np.ndarray, y: np.ndarray, semantic: dict | None,
                         n_patches: int, rng, orientation: str = "clear", forward=None):
    """Build every generator-side term for one (clear, rainy) pair.

    ``forward`` optionally supplies an already computed ``(z, taps_of_x)``.
    Returns (total objective, parts, generated image tensor, (dx, dy, dz) arrays).
    Discriminator parameters are frozen copies: no gradient reaches them.
    """
    d_params = _frozen(net.discriminator)
    z, fx = forward if forward is not None else M.generator_forward(
        net.generator, x, mcfg, return_taps=True)
    fx = [f.detach() for f in fx]
    fz = M.encode(net.generator, z, mcfg)
    dz = M.discriminator_forward(d_params, z)
    dx = M.discriminator_forward(d_params, x).detach()
    dy = M.discriminator_forward(d_params, y).detach()
    with _term("loss_gan"):
        gan = L.generator_gan_loss(dz)
    sets = []
    for tap, a, b in zip(mcfg.taps, fx, fz):
        n = min(n_patches, a.shape[2] * a.shape[3])
        sets.extend(M.sample_patches([a], [b], net.heads, [tap], n, rng, orientation=orientation))
    with _term("loss_nce"):
        nce = S.mean(S.concat([S.reshape(L.nce_loss(ps, lcfg, semantic), (1,)) for ps in sets]))
    with _term("loss_geom"):
        geom = L.geometric_loss(lcfg, dx, dy, dz)
    parts = {"gan": gan, "nce": nce, "geom": geom}
    with _term("loss_total"):
        total = L.composite_objective(parts, lcfg)
    return total, parts, z, (dx.data, dy.data, dz.data)


def train(cfg: TrainConfig, log_path=None, data=None) -> TrainResult:
    """Alternating discriminator-then-generator updates on the configured objective."""
    lcfg = cfg.loss_config()
    mcfg = cfg.model_config()
    net = M.init_params(cfg.seed, mcfg)
    result = TrainResult(net, cfg.digest())
    if cfg.epochs == 0:
        if log_path is not None:
            Path(log_path).write_text("")
        return result
    clear, rainy = data if data is not None else load_training_data(cfg)
    sem_key = lcfg.nce_variant.split("_")[1] if lcfg.nce_variant.startswith("sence") else None
    cache = None
    if sem_key is not None:
        cache = ScoreCache({i: c.segmap for i, c in enumerate(clear)},
                           {j: r.segmap for j, r in enumerate(rainy)})

    g_params = {**{f"G.{k}": v for k, v in net.generator.items()},
                **{f"H.{k}": v for k, v in net.heads.items()}}
    d_params = {f"D.{k}": v for k, v in net.discriminator.items()}
    opt_g = Adam(g_params, cfg.adam_beta1, cfg.adam_beta2)
    opt_d = Adam(d_params, cfg.adam_beta1, cfg.adam_beta2)
    order_rng = _rng(cfg.seed, 1)
    patch_rng = _rng(cfg.seed, 2)
    iters = cfg.iters_per_epoch or math.ceil(len(clear) / cfg.batch_size)
    log_file = open(log_path, "w") if log_path is not None else None
    try:
        for epoch in range(cfg.epochs):
            lr = cfg.learning_rate(epoch)
            sums = dict.fromkeys(LOG_TERMS, 0.0)
            count = 0
            perm = order_rng.permutation(len(clear))
            cursor = 0
            for _ in range(iters):
                batch = []
                for _ in range(cfg.batch_size):
                    if cursor == len(perm):
                        perm, cursor = order_rng.permutation(len(clear)), 0
                    i = int(perm[cursor])
                    cursor += 1
                    j = int(order_rng.integers(len(rainy)))
                    batch.append((i, j, _crop(clear[i], cfg.crop_size, order_rng),
                                  _crop(rainy[j], cfg.crop_size, order_rng)))

                # generator forward for every item, shared by both updates
                staged = []
                for i, j, x, y in batch:
                    semantic = None
                    if cache is not None:
                        s = cache(i, j)
                        semantic = {"mpa": s.mpa, "miou": s.miou}
                    fwd = M.generator_forward(net.generator, x, mcfg, return_taps=True)
                    staged.append((x, y, semantic, fwd))

                # discriminator update
                d_grads = {k: np.zeros_like(v.data) for k, v in d_params.items()}
                loss_d_sum = 0.0
                for x, y, _, (z, _) in staged:
                    loss_d, _ = L.gan_losses(M.discriminator_forward(net.discriminator, y),
                                             M.discriminator_forward(net.discriminator, z.detach()))
                    for k, g in zip(d_params, S.gradients(loss_d, list(d_params.values()))):
                        d_grads[k] += g / len(staged)
                    loss_d_sum += loss_d.item() / len(staged)
                opt_d.step(d_grads, lr)

                # generator update
                g_grads = {k: np.zeros_like(v.data) for k, v in g_params.items()}
                for x, y, semantic, fwd in staged:
                    total, parts, _, maps = generator_step_terms(
                        net, mcfg, lcfg, x, y, semantic, cfg.num_patches, patch_rng,
                        cfg.orientation, forward=fwd)
                    for k, g in zip(g_params, S.gradients(total, list(g_params.values()))):
                        g_grads[k] += g / len(staged)
                    terms = {
                        "loss_gan": parts["gan"].item(),
                        "loss_nce": parts["nce"].item(),
                        "loss_geom": 0.0 if parts["geom"] is None else parts["geom"].item(),
                        "loss_total": total.item(),
                        "segment_distance": metrics.point_to_segment(*maps),
                        "semantic": 0.0 if semantic is None else semantic[sem_key],
                    }
                    _check_finite(terms)
                    for k, v in terms.items():
                        sums[k] += v
                    count += 1
                _check_finite({"loss_d": loss_d_sum})
                sums["loss_d"] += loss_d_sum
                opt_g.step(g_grads, lr)

            record = {"epoch": epoch + 1, "lr": lr, "iterations": iters}
            record.update({k: sums[k] / count for k in LOG_TERMS})
            result.history.append(record)
            if log_file is not None:
                log_file.write(json.dumps(record, sort_keys=True) + "\n")
                log_file.flush()
            log.info("epoch %d/%d lr=%.1e total=%.4f nce=%.4f geom=%.4f seg=%.4f", epoch + 1,
                     cfg.epochs, lr, record["loss_total"], record["loss_nce"], record["loss_geom"],
                     record["segment_distance"])
    finally:
        if log_file is not None:
            log_file.close()
    return result


def save_result(result: TrainResult, path) -> Path:
    return ckpt.save(path, result.flat(), result.digest)


def model_config_from_params(flat: dict[str, np.ndarray]) -> M.ModelConfig:
    ngf = flat["G.down0.w"].shape[0]
    n_res = len({k.split(".")[1] for k in flat if k.startswith("G.res")})
    ndf = flat["D.conv0.w"].shape[0]
    taps = tuple(sorted({int(k.split(".")[1][3:]) for k in flat if k.startswith("H.tap")}))
    embed = flat[f"H.tap{taps[0]}.fc2.w"].shape[1] if taps else 64
    return M.ModelConfig(ngf, n_res, ndf, embed, taps)


def load_networks(path, expected_digest: bytes | None = None) -> tuple[M.Networks, M.ModelConfig]:
    flat, _ = ckpt.load(path, expected_digest)
    return M.Networks.from_flat(flat), model_config_from_params(flat)


def translate_image(generator: M.Params, mcfg: M.ModelConfig, image: np.ndarray) -> np.ndarray:
    """Translate an H×W×3 image at native size, edge-padding up to multiples of 8."""
    h, w = image.shape[:2]
    ph, pw = (-h) % 8, (-w) % 8
    padded = np.pad(image, ((0, ph), (0, pw), (0, 0)), mode="edge") if ph or pw else image
    out = M.generator_forward(generator, _chw(padded), mcfg).data
    return out.transpose(1, 2, 0)[:h, :w]


def translate(checkpoint_path, input_dir, output_dir) -> list[Path]:
    net, mcfg = load_networks(checkpoint_path)
    out_dir = Path(output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for item in load_image_folder(input_dir):
        target = out_dir / (Path(item.name).stem + ".png")
        save_image(translate_image(net.generator, mcfg, item.image), target)
        written.append(target)
    return written


def evaluate_networks(net: M.Networks, mcfg: M.ModelConfig, manifest: DatasetManifest,
                      bandwidth="auto") -> metrics.DomainReport:
    clear = [c.image for c in load_split(manifest, "testA")]
    rainy = [r.image for r in load_split(manifest, "testB")]
    if not clear or not rainy:
        raise TrainingError("testA and testB must both be non-empty")
    generated = [translate_image(net.generator, mcfg, im) for im in clear]
    triples = []
    for k, (x, z) in enumerate(zip(clear, generated)):
        y = rainy[k % len(rainy)]
        if x.shape != y.shape or x.shape[0] % 16 or x.shape[1] % 16:
            continue
        dmap = [M.discriminator_forward(net.discriminator, _chw(im)).data for im in (x, y, z)]
        triples.append(tuple(dmap))
    return metrics.domain_report(clear, rainy, generated, triples, bandwidth)


def evaluate(checkpoint_path, manifest_path, report_path=None) -> metrics.DomainReport:
    net, mcfg = load_networks(checkpoint_path)
    report = evaluate_networks(net, mcfg, DatasetManifest.read(manifest_path))
    if report_path is not None:
        Path(report_path).write_text(report.to_json() + "\n")
    return report


ABLATION_COLUMNS = ("variant", "ptl", "tps", "patchnce", "monce", "sence_miou", "sence_mpa",
                    "mmd2", "energy_distance", "baseline_mmd2", "baseline_energy_distance",
                    "mean_segment_distance", "final_loss_geom", "max_abs_loss_geom")


def variant_flags(variant: str) -> dict[str, int]:
    geom, nce = L.ABLATION_VARIANTS[variant]
    return {
        "ptl": int(geom == "ptl"),
        "tps": int(geom == "tps"),
        "patchnce": int(nce == "patchnce"),
        "monce": int(nce.startswith("monce")),
        "sence_miou": int(nce == "sence_miou"),
        "sence_mpa": int(nce == "sence_mpa"),
    }


def ablate(base: TrainConfig, variants: Sequence[str], out_dir, data=None) -> list[dict]:
    """Train and evaluate each variant from the same seed; write ``ablation.tsv`` under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest.read(base.manifest)
    if data is None:
        needs_seg = any(L.ABLATION_VARIANTS[v][1].startswith("sence") for v in variants)
        data = (load_split(manifest, "trainA", needs_seg, base.num_classes),
                load_split(manifest, "trainB", needs_seg, base.num_classes))
    rows = []
    for variant in variants:
        cfg = base.replace(variant=variant)
        result = train(cfg, out / f"{variant}.log.jsonl", data=data)
        save_result(result, out / f"{variant}.ckpt")
        report = evaluate_networks(result.networks, cfg.model_config(), manifest)
        geoms = [h["loss_geom"] for h in result.history]
        row = {"variant": variant, **variant_flags(variant),
               "mmd2": report.mmd2, "energy_distance": report.energy_distance,
               "baseline_mmd2": report.baseline_mmd2,
               "baseline_energy_distance": report.baseline_energy_distance,
               "mean_segment_distance": report.mean_segment_distance,
               "final_loss_geom": geoms[-1] if geoms else 0.0,
               "max_abs_loss_geom": max((abs(g) for g in geoms), default=0.0)}
        rows.append(row)
    write_table(rows, out / "ablation.tsv")
    return rows


def write_table(rows: list[dict], path) -> Path:
    lines = ["\t".join(ABLATION_COLUMNS)]
    for r in rows:
        lines.append("\t".join(f"{r[c]:.6g}" if isinstance(r[c], float) else str(r[c])
                               for c in ABLATION_COLUMNS))
    Path(path).write_text("\n".join(lines) + "\n")
    return Path(path)


def read_table(path) -> list[dict]:
    header, *body = Path(path).read_text().splitlines()
    cols = header.split("\t")
    return [dict(zip(cols, line.split("\t"))) for line in body]

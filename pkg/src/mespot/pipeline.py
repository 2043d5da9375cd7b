"""End-to-end orchestration: corpus generation, training, density fitting,
spotting, and evaluation, all keyed off one master seed."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .config import PipelineConfig
from .density import GmmModel, em_fit, kmeans_init, reduce_latent_seq
from .evaluate import EvalReport, evaluate
from .manifest import Manifest, load_clip, load_manifest
from .modelio import load_model, save_model
from .preprocessing import Bag, build_bags
from .rcae import RcaeModel, encode_batch, train_layerwise
from .spotting import (
    ScoreCurves,
    SpottingResult,
    score_clip,
    spot,
    write_curves_csv,
    write_result_json,
)
from .synthetic import SynthConfig


def _train_clip_stream(manifest: Manifest):
    for entry in manifest.by_split("train"):
        yield load_clip(manifest, entry)


def build_training_bags(
    manifest: Manifest, config: PipelineConfig, seed: int, block_size: int | None = None
) -> list[Bag]:
    """Sample the 16 training bags from the manifest's train split, keeping
    labeled anomaly frames out of every instance."""
    return build_bags(
        _train_clip_stream(manifest),
        scales=config.scales,
        n_windows=config.n_windows,
        seed=seed,
        block_size=block_size or config.block_size,
        exclusions=manifest.exclusion_map(),
    )


def train_autoencoder(manifest: Manifest, config: PipelineConfig, seed: int) -> RcaeModel:
    bags = build_training_bags(manifest, config, seed)
    return train_layerwise(bags, config, seed=seed)


def fit_bag_densities(
    model: RcaeModel,
    bags: list[Bag],
    config: PipelineConfig,
    seed: int,
    encode_chunk: int = 64,
) -> list[GmmModel]:
    """Fit one mixture per bag on the latents of all 20 steps of each
    instance (eval-mode encoding, final-step scoring happens elsewhere)."""
    gmms: list[GmmModel] = []
    for bag in bags:
        if not bag.instances:
            raise ValueError(f"bag {bag.block_index} has no instances")
        feats = []
        x = np.stack([inst.frames for inst in bag.instances]).astype(np.float32)
        for lo in range(0, x.shape[0], encode_chunk):
            latents = encode_batch(x[lo : lo + encode_chunk], model)
            for lat in latents:
                feats.append(reduce_latent_seq(lat, config.reduction))
        samples = np.concatenate(feats, axis=0)
        init = kmeans_init(
            samples,
            config.gmm_components,
            seed=np.random.SeedSequence(entropy=seed, spawn_key=(300, bag.block_index)),
        )
        gmm = em_fit(
            samples,
            init,
            tol=config.em_tol,
            max_iter=config.em_max_iter,
            bag_index=bag.block_index,
            reduction=config.reduction,
        )
        gmms.append(gmm)
    return gmms


def spot_split(
    manifest: Manifest,
    model: RcaeModel,
    gmms: list[GmmModel],
    config: PipelineConfig,
    split: str = "test",
    out_dir: str | Path | None = None,
) -> list[tuple[ScoreCurves, SpottingResult]]:
    """Score and threshold every clip of a split; optionally write one CSV
    and one JSON result file per clip."""
    entries = manifest.by_split(split)
    if not entries:
        raise ValueError(f"manifest has no {split!r} clips")
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    results = []
    for entry in entries:
        clip = load_clip(manifest, entry)
        curves = score_clip(clip, model, gmms, normalize=config.normalize)
        result = spot(curves, eps_range=config.eps_range,
                      smooth_block_scores=config.smooth_block_scores)
        if out_dir is not None:
            write_curves_csv(out_dir / f"{entry.clip_id}.csv", curves, result)
            write_result_json(out_dir / f"{entry.clip_id}.json", curves, result)
        results.append((curves, result))
    return results


def run_pipeline(
    out_dir: str | Path,
    seed: int,
    config: PipelineConfig,
    synth_cfg: SynthConfig | None = None,
) -> EvalReport:
    """synth -> train -> fit-density -> spot -> eval with one seed.

    Writes data/ (corpus), model.bin, spot/ (per-clip results), and
    report.json under out_dir; returns the evaluation report.
    """
    from .synthetic import synth_generate

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if synth_cfg is None:
        synth_cfg = SynthConfig(frame_size=config.frame_size, seed=seed)
    manifest_path = synth_generate(synth_cfg, out_dir / "data")
    manifest = load_manifest(manifest_path)
    model = train_autoencoder(manifest, config, seed)
    bags = build_training_bags(manifest, config, seed)
    gmms = fit_bag_densities(model, bags, config, seed)
    model_path = out_dir / "model.bin"
    save_model(model_path, model, gmms)
    model, gmms = load_model(model_path)
    spotted = spot_split(manifest, model, gmms, config, split="test", out_dir=out_dir / "spot")
    report = evaluate(spotted, manifest)
    report.to_json(out_dir / "report.json")
    return report

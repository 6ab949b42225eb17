"""Four-phase experiment runner with a lineage manifest.

Workspace layout::

    run_config.json              effective configuration snapshot
    data/<variant>/              augmented copies (multi, jpeg, crop) + manifest + records
    phase_<P>/<artifact>.gmb     weight bundles
    phase_<P>/telemetry/*.jsonl  one record per epoch
    lineage.json                 artifacts, parents, digests, completed phases

Phase I fits detectors on clean data, II refits them on multi-augmented data
(plus separate refits per individually augmented set), III attaches one
secondary per source to the phase-II primary, IV refits attribution on
augmented data using the matching phase-II primaries.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import augment
from .manifest import DatasetManifest, SampleRecord
from .models import ModelBundle, build_baseline, build_primary, build_secondary, load_bundle, save_bundle
from .preprocess import SpectrumStats, batch_inputs, fit_spectrum_stats, load_image, log_spectrum, save_image, standardize
from .training import MODEL_SEEDS, TrainConfig, freeze, one_vs_rest_labels, train, train_secondaries

log = logging.getLogger(__name__)

PHASES = ("I", "II", "III", "IV")
PREREQ = {"I": None, "II": "I", "III": "II", "IV": "III"}
MODELS = ("proposed", "gandct-conv", "ganfp-postpool")


class DependencyError(RuntimeError):
    pass


@dataclass
class RunConfig:
    manifest: str
    workspace: str
    representation: str = "pixel"
    models: list[str] = field(default_factory=lambda: ["proposed"])
    seeds: list[int] = field(default_factory=lambda: list(MODEL_SEEDS))
    data_seed: int = 0
    individual: list[str] = field(default_factory=lambda: ["jpeg", "crop"])
    batch_size: int = 128
    max_epochs: int = 100
    patience: int = 5
    min_delta: float = 0.0
    lr_detection: float = 1e-3
    lr_attribution: float = 1e-4
    threads: int = 1

    def validate(self) -> "RunConfig":
        if not Path(self.manifest).is_file():
            raise FileNotFoundError(f"manifest not found: {self.manifest}")
        if self.representation not in ("pixel", "dct"):
            raise ValueError("representation must be 'pixel' or 'dct'")
        bad = [m for m in self.models if m not in MODELS]
        if bad:
            raise ValueError(f"unknown models {bad}; choose from {MODELS}")
        bad = [v for v in self.individual if v not in ("jpeg", "crop")]
        if bad:
            raise ValueError(f"individual augmentations must be jpeg/crop, got {bad}")
        return self

    def digest(self) -> str:
        d = asdict(self)
        d.pop("workspace")
        d.pop("threads")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def train_config(self, task: str, seed: int) -> TrainConfig:
        lr = self.lr_detection if task == "detection" else self.lr_attribution
        return TrainConfig(task=task, lr=lr, batch_size=self.batch_size, max_epochs=self.max_epochs,
                           patience=self.patience, min_delta=self.min_delta, data_seed=self.data_seed,
                           model_seed=seed)


class Lineage:
    def __init__(self, path: Path):
        self.path = path
        if path.exists():
            data = json.loads(path.read_text())
        else:
            data = {"phases_completed": [], "phase_artifacts": {}, "artifacts": {}, "config_digest": None}
        self.data = data

    @property
    def artifacts(self) -> dict:
        return self.data["artifacts"]

    def completed(self, phase: str) -> bool:
        return phase in self.data["phases_completed"]

    def mark(self, phase: str, made: list[str]):
        if phase not in self.data["phases_completed"]:
            self.data["phases_completed"].append(phase)
        self.data["phase_artifacts"][phase] = list(made)
        self.save()

    def add(self, art_id: str, **entry):
        self.artifacts[art_id] = entry
        self.save()

    def save(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.data, indent=1, sort_keys=True))

    def parent_chain(self, art_id: str) -> list[str]:
        chain = []
        while art_id is not None:
            chain.append(art_id)
            art_id = self.artifacts[art_id].get("parent")
        return chain


def _file_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class Workspace:
    """Holds data variants in memory and executes phases against one RunConfig."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg.validate()
        self.root = Path(cfg.workspace)
        self.root.mkdir(parents=True, exist_ok=True)
        self.lineage = Lineage(self.root / "lineage.json")
        if self.lineage.data.get("config_digest") not in (None, cfg.digest()):
            raise DependencyError("workspace was created with a different run configuration; "
                                  "use a fresh workspace")
        self.lineage.data["config_digest"] = cfg.digest()
        self.lineage.save()
        (self.root / "run_config.json").write_text(json.dumps(asdict(cfg), indent=1, sort_keys=True))
        self.manifest = DatasetManifest.load(cfg.manifest)
        self.sources = self.manifest.sources()
        self._images: dict[str, dict[str, np.ndarray]] = {}
        self._stats: SpectrumStats | None = None

    # ---------------------------------------------------------------- data

    def images(self, variant: str) -> dict[str, np.ndarray]:
        if variant not in self._images:
            if variant == "clean":
                size = self.manifest.image_size
                self._images[variant] = {r.image_id: standardize(load_image(self.manifest.resolve(r)), size)
                                         for r in self.manifest.rows}
            else:
                self._images[variant] = self._materialize(variant)
        return self._images[variant]

    def _materialize(self, variant: str) -> dict[str, np.ndarray]:
        out_dir = self.root / "data" / variant
        man_path = out_dir / "manifest.jsonl"
        if man_path.exists():
            man = DatasetManifest.load(man_path)
            return {r.image_id: load_image(man.resolve(r)) for r in man.rows}
        clean = self.images("clean")
        items = [(r.image_id, clean[r.image_id]) for r in self.manifest.rows]
        if variant == "multi":
            aug_items, records = augment.multi_augment_dataset(items, self.cfg.data_seed)
        else:
            aug_items, records = augment.individually_augment(items, variant, self.cfg.data_seed)
        rows = []
        for r, (image_id, img), rec in zip(self.manifest.rows, aug_items, records):
            # stored losslessly: the saved pixels are exactly the (already JPEG-decoded) training input
            rel = f"images/{r.source}/{image_id}.png"
            save_image(img, out_dir / rel)
            rows.append(SampleRecord(rel, r.label, r.source, r.split, image_id))
        notes = {"variant": variant, "parent_manifest": str(self.cfg.manifest), "codec": augment.codec_info()}
        man = DatasetManifest(rows, self.cfg.data_seed, self.manifest.image_size, notes, out_dir)
        with open(out_dir / "augmentation_records.jsonl", "w") as fh:
            for rec in records:
                fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")
        man.save(man_path)
        return {image_id: img for image_id, img in aug_items}

    def stats(self) -> SpectrumStats | None:
        if self.cfg.representation != "dct":
            return None
        if self._stats is None:
            clean = self.images("clean")
            self._stats = fit_spectrum_stats(log_spectrum(clean[r.image_id])
                                             for r in self.manifest.select(split="train"))
        return self._stats

    def split(self, variant: str, split: str):
        rows = self.manifest.select(split=split)
        imgs = self.images(variant)
        x = batch_inputs([imgs[r.image_id] for r in rows], self.cfg.representation, self.stats())
        return x, rows

    # ------------------------------------------------------------- helpers

    def _input_size(self) -> int:
        return self.manifest.image_size

    def _new_model(self, model: str, seed: int):
        size = self._input_size()
        if model == "proposed":
            return build_primary(self.cfg.representation, size, seed=seed, dtype=np.float32)
        return build_baseline(model, "sigmoid", self.cfg.representation, size, seed=seed, dtype=np.float32)

    def _save(self, phase, art_id, bundle, parent, variant, model, seed, telemetry, role):
        rel = Path(f"phase_{phase}") / (art_id.replace("/", "__") + ".gmb")
        save_bundle(bundle, self.root / rel)
        tel_rel = Path(f"phase_{phase}") / "telemetry" / (art_id.replace("/", "__") + ".jsonl")
        (self.root / tel_rel).parent.mkdir(parents=True, exist_ok=True)
        with open(self.root / tel_rel, "w") as fh:
            for name, hist in telemetry.items():
                for tel in hist:
                    fh.write(json.dumps({"module": name, **asdict(tel)}, sort_keys=True) + "\n")
        self.lineage.add(art_id, phase=phase, path=str(rel), digest=_file_digest(self.root / rel),
                         primary_digest=bundle.primary.digest(), parent=parent, variant=variant,
                         model=model, seed=seed, role=role, config_digest=self.cfg.digest(),
                         telemetry=str(tel_rel))

    def load(self, art_id: str) -> ModelBundle:
        entry = self.lineage.artifacts.get(art_id)
        if entry is None:
            raise DependencyError(f"missing artifact {art_id}")
        return load_bundle(self.root / entry["path"])

    def _detect(self, model, variant, seed):
        cfg = self.cfg.train_config("detection", seed)
        tx, trows = self.split(variant, "train")
        vx, vrows = self.split(variant, "val")
        ty = np.array([r.label == "fake" for r in trows], dtype=np.int64)
        vy = np.array([r.label == "fake" for r in vrows], dtype=np.int64)
        return train(model, tx, ty, vx, vy, cfg)

    # -------------------------------------------------------------- phases

    def run_phase(self, phase: str, force: bool = False) -> list[str]:
        if phase not in PHASES:
            raise ValueError(f"unknown phase {phase!r}")
        need = PREREQ[phase]
        if need is not None and not self.lineage.completed(need):
            raise DependencyError(f"phase {phase} requires phase {need} artifacts; run phase {need} first")
        if self.lineage.completed(phase) and not force:
            log.info("phase %s already complete, skipping", phase)
            return list(self.lineage.data["phase_artifacts"][phase])
        made = getattr(self, f"_phase_{phase}")()
        self.lineage.mark(phase, made)
        return made

    def _phase_I(self):
        made = []
        for model_name in self.cfg.models:
            for seed in self.cfg.seeds:
                model = self._new_model(model_name, seed)
                res = self._detect(model, "clean", seed)
                art = f"I/clean/{model_name}/s{seed}"
                self._save("I", art, ModelBundle(model, {}, self.stats()), None, "clean", model_name, seed,
                           {model_name: res.history}, "detector")
                made.append(art)
        return made

    def _phase_II(self):
        made = []
        for variant in ["multi"] + list(self.cfg.individual):
            for model_name in self.cfg.models:
                for seed in self.cfg.seeds:
                    parent = f"I/clean/{model_name}/s{seed}"
                    model = self.load(parent).primary
                    res = self._detect(model, variant, seed)
                    art = f"II/{variant}/{model_name}/s{seed}"
                    self._save("II", art, ModelBundle(model, {}, self.stats()), parent, variant, model_name, seed,
                               {model_name: res.history}, "detector")
                    made.append(art)
        return made

    def _attribution_data(self, variant):
        tx, trows = self.split(variant, "train")
        vx, vrows = self.split(variant, "val")
        return tx, [r.source for r in trows], vx, [r.source for r in vrows]

    def _fit_secondaries(self, primary, secondaries, variant, seed):
        tx, ts, vx, vs = self._attribution_data(variant)
        cfg = self.cfg.train_config("attribution", seed)
        return train_secondaries(freeze(primary), secondaries, tx, ts, vx, vs, cfg, workers=self.cfg.threads)

    def _fit_baseline_attributors(self, variant, seed, model_name, parent_prefix=None):
        """One binary baseline per source; retrained from the phase-III instance when given."""
        tx, ts, vx, vs = self._attribution_data(variant)
        cfg = self.cfg.train_config("attribution", seed)
        out = {}
        for src in self.sources:
            model = (self.load(f"{parent_prefix}/{src}/s{seed}").primary if parent_prefix
                     else self._new_model(model_name, seed))
            res = train(model, tx, one_vs_rest_labels(ts, src), vx, one_vs_rest_labels(vs, src), cfg)
            out[src] = (model, res)
        return out

    def _phase_III(self):
        made = []
        for model_name in self.cfg.models:
            for seed in self.cfg.seeds:
                if model_name == "proposed":
                    parent = f"II/multi/proposed/s{seed}"
                    primary = self.load(parent).primary
                    secs = {s: build_secondary(primary, s, seed=seed) for s in self.sources}
                    results = self._fit_secondaries(primary, secs, "clean", seed)
                    art = f"III/clean/proposed/s{seed}"
                    self._save("III", art, ModelBundle(primary, secs, self.stats()), parent, "clean", model_name,
                               seed, {k: r.history for k, r in results.items()}, "attributor")
                    made.append(art)
                else:
                    for src, (model, res) in self._fit_baseline_attributors("clean", seed, model_name).items():
                        art = f"III/clean/{model_name}/{src}/s{seed}"
                        self._save("III", art, ModelBundle(model, {}, self.stats()), None, "clean", model_name,
                                   seed, {src: res.history}, "baseline-attributor")
                        made.append(art)
        return made

    def _phase_IV(self):
        made = []
        for model_name in self.cfg.models:
            for seed in self.cfg.seeds:
                if model_name == "proposed":
                    parent = f"III/clean/proposed/s{seed}"
                    bundle = self.load(parent)
                    results = self._fit_secondaries(bundle.primary, bundle.secondaries, "multi", seed)
                    art = f"IV/multi/proposed/s{seed}"
                    self._save("IV", art, bundle, parent, "multi", model_name, seed,
                               {k: r.history for k, r in results.items()}, "attributor")
                    made.append(art)
                    for variant in self.cfg.individual:
                        parent = f"II/{variant}/proposed/s{seed}"
                        primary = self.load(parent).primary
                        secs = {s: build_secondary(primary, s, seed=seed) for s in self.sources}
                        results = self._fit_secondaries(primary, secs, variant, seed)
                        art = f"IV/{variant}/proposed/s{seed}"
                        self._save("IV", art, ModelBundle(primary, secs, self.stats()), parent, variant,
                                   model_name, seed, {k: r.history for k, r in results.items()}, "attributor")
                        made.append(art)
                else:
                    for variant in ["multi"] + list(self.cfg.individual):
                        fitted = self._fit_baseline_attributors(variant, seed, model_name,
                                                                parent_prefix=f"III/clean/{model_name}")
                        for src, (model, res) in fitted.items():
                            art = f"IV/{variant}/{model_name}/{src}/s{seed}"
                            self._save("IV", art, ModelBundle(model, {}, self.stats()),
                                       f"III/clean/{model_name}/{src}/s{seed}", variant, model_name, seed,
                                       {src: res.history}, "baseline-attributor")
                            made.append(art)
        return made

    def run(self, phases=PHASES, force: bool = False) -> dict[str, list[str]]:
        phases = list(phases)
        for p in phases:
            if p not in PHASES:
                raise ValueError(f"unknown phase {p!r}")
        if phases != sorted(phases, key=PHASES.index):
            raise DependencyError(f"phases must run in order I, II, III, IV; got {phases}")
        return {p: self.run_phase(p, force=force) for p in phases}

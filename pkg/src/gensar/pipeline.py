"""Stage orchestration: configuration, on-disk layout and manifests."""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np

from . import corpus as cp
from . import decode_eval as de
from . import rqvae as rq
from . import seqmodel as sm
from .errors import ConfigError, MissingInputError
from .identifier import TokenVocabulary, collision_rate, read_identifiers, write_identifiers

log = logging.getLogger(__name__)

ENV_WORKDIR = "GENSAR_WORKDIR"


@dataclass
class EvalSettings:
    negatives: str = "bm25"  # search negatives; recommendation negatives are always random
    beam_width: int = 10  # 0 skips the full-catalog generation report

    def __post_init__(self):
        if self.negatives not in ("random", "bm25"):
            raise ConfigError(f"negatives must be 'random' or 'bm25', got {self.negatives!r}")
        if self.beam_width < 0:
            raise ConfigError("beam_width must be >= 0")


@dataclass
class TaskFlags:
    nrip: bool = True
    nsqp: bool = True
    nsip: bool = True
    desc2id: bool = True
    id2desc: bool = True
    behavior_token: bool = True

    @property
    def tasks(self) -> List[str]:
        return [t for t in cp.TASKS if getattr(self, t)]

    @property
    def variant(self) -> str:
        """Directory name for data/model/report outputs of this flag set."""
        off = [f"no-{t}" for t in cp.TASKS if not getattr(self, t)]
        if not self.behavior_token:
            off.append("no-behavior")
        return "-".join(off) or "full"

    def __post_init__(self):
        if not self.tasks:
            raise ConfigError("at least one training task must stay enabled")


# RQ-VAE and model settings exposed in the config file; dimensions and seeds
# come from elsewhere.
RQVAE_KEYS = ("latent_dim", "shared_levels", "specific_levels", "codebook_size", "commitment_weight", "epochs", "batch_size", "lr", "final_lr")
MODEL_KEYS = (
    "dim", "encoder_layers", "decoder_layers", "heads", "ffn_dim", "max_source_len",
    "max_target_len", "dropout", "lr", "epochs", "batch_size", "alignment_per_item",
)
SYNTH_KEYS = tuple(f.name for f in dataclasses.fields(cp.SynthConfig) if f.name != "seed")

DEFAULT_RQVAE = dict(latent_dim=16, shared_levels=2, specific_levels=2, codebook_size=64, epochs=300, batch_size=32, lr=3e-3, final_lr=1e-4)
DEFAULT_MODEL = dict(epochs=20)


@dataclass
class PipelineConfig:
    workdir: Path = Path("gensar-work")
    seed: int = 0
    synth: Dict[str, object] = field(default_factory=dict)
    rqvae: Dict[str, object] = field(default_factory=lambda: dict(DEFAULT_RQVAE))
    model: Dict[str, object] = field(default_factory=lambda: dict(DEFAULT_MODEL))
    eval: EvalSettings = field(default_factory=EvalSettings)
    flags: TaskFlags = field(default_factory=TaskFlags)

    def synth_config(self) -> cp.SynthConfig:
        return cp.SynthConfig(**self.synth, seed=self.seed)

    def rqvae_config(self, semantic_dim: int, collab_dim: int) -> rq.RqvaeConfig:
        return rq.RqvaeConfig(semantic_dim=semantic_dim, collab_dim=collab_dim, **self.rqvae, seed=self.seed)

    def model_config(self, vocab_size: int) -> sm.SeqModelConfig:
        levels = int(self.rqvae.get("shared_levels", 2)) + int(self.rqvae.get("specific_levels", 2))
        return sm.SeqModelConfig(vocab_size=vocab_size, identifier_length=levels, **self.model, seed=self.seed)

    def validate(self) -> None:
        """Instantiate every stage config once so bad values fail early."""
        self.synth_config()
        self.rqvae_config(1, 1)
        self.model_config(8)

    def as_dict(self) -> dict:
        return {
            "seed": self.seed,
            "synth": dict(sorted(self.synth.items())),
            "rqvae": dict(sorted(self.rqvae.items())),
            "model": dict(sorted(self.model.items())),
            "eval": dataclasses.asdict(self.eval),
            "tasks": dataclasses.asdict(self.flags),
        }


def _convert(section: str, key: str, raw: str, default):
    try:
        if isinstance(default, bool):
            return configparser.ConfigParser.BOOLEAN_STATES[raw.strip().lower()]
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if default is None:  # optional float
            return None if raw.strip().lower() in ("", "none") else float(raw)
        return raw.strip()
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"[{section}] {key} = {raw!r}: expected {type(default).__name__}") from exc


def _section(parser, name: str, keys: Sequence[str], defaults: Mapping[str, object]) -> Dict[str, object]:
    if not parser.has_section(name):
        return {}
    out = {}
    for key, raw in parser.items(name):
        if key not in keys:
            raise ConfigError(f"unknown key {key!r} in section [{name}]")
        out[key] = _convert(name, key, raw, defaults[key])
    return out


def load_config(path=None) -> PipelineConfig:
    """Read an INI file with sections [run], [synth], [rqvae], [model],
    [eval] and [tasks]; absent keys keep their defaults."""
    cfg = PipelineConfig()
    parser = configparser.ConfigParser()
    if path is not None:
        if not Path(path).exists():
            raise MissingInputError(str(path))
        parser.read(path)
    known = {"run", "synth", "rqvae", "model", "eval", "tasks"}
    extra = set(parser.sections()) - known
    if extra:
        raise ConfigError(f"unknown config section(s): {sorted(extra)}")
    synth_defaults = {f.name: f.default for f in dataclasses.fields(cp.SynthConfig)}
    rq_defaults = {f.name: f.default for f in dataclasses.fields(rq.RqvaeConfig) if f.name in RQVAE_KEYS}
    model_defaults = {f.name: f.default for f in dataclasses.fields(sm.SeqModelConfig) if f.name in MODEL_KEYS}
    run = _section(parser, "run", ("workdir", "seed"), {"workdir": "", "seed": 0})
    if "workdir" in run:
        cfg.workdir = Path(run["workdir"])
    cfg.seed = int(run.get("seed", cfg.seed))
    cfg.synth.update(_section(parser, "synth", SYNTH_KEYS, synth_defaults))
    cfg.rqvae.update(_section(parser, "rqvae", RQVAE_KEYS, rq_defaults))
    cfg.model.update(_section(parser, "model", MODEL_KEYS, model_defaults))
    ev = dataclasses.asdict(cfg.eval)
    ev.update(_section(parser, "eval", tuple(ev), ev))
    cfg.eval = EvalSettings(**ev)
    fl = dataclasses.asdict(cfg.flags)
    fl.update(_section(parser, "tasks", tuple(fl), fl))
    cfg.flags = TaskFlags(**fl)
    if os.environ.get(ENV_WORKDIR):
        cfg.workdir = Path(os.environ[ENV_WORKDIR])
    try:
        cfg.validate()
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


# --- layout and manifests -------------------------------------------------------

class OutputExistsError(ConfigError):
    """A stage would overwrite existing outputs without ``--force``."""


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()


class Layout:
    def __init__(self, workdir):
        self.root = Path(workdir)

    corpus = property(lambda self: self.root / "corpus")
    ids = property(lambda self: self.root / "ids")
    catalog = property(lambda self: self.corpus / "catalog.jsonl")
    queries = property(lambda self: self.corpus / "queries.jsonl")
    histories = property(lambda self: self.corpus / "histories.jsonl")
    embeddings = property(lambda self: self.corpus / "embeddings.gseb")
    rqvae = property(lambda self: self.ids / "rqvae.gsnm")
    rqvae_history = property(lambda self: self.ids / "rqvae_history.json")
    identifiers = property(lambda self: self.ids / "identifiers.jsonl")
    vocab = property(lambda self: self.ids / "vocab.jsonl")
    collision = property(lambda self: self.root / "reports" / "collision.json")

    def data(self, variant: str) -> Path:
        return self.root / "data" / variant

    def model(self, variant: str) -> Path:
        return self.root / "model" / variant

    def reports(self, variant: str) -> Path:
        return self.root / "reports" / variant

    def eval_report(self, variant: str, negatives: str) -> Path:
        return self.reports(variant) / f"eval_{negatives}.json"


def _rel(layout: Layout, path: Path) -> str:
    try:
        return str(Path(path).relative_to(layout.root))
    except ValueError:
        return str(path)


def run_stage(
    layout: Layout,
    name: str,
    manifest: Path,
    inputs: Sequence[Path],
    outputs: Sequence[Path],
    config: dict,
    seed: int,
    body: Callable[[], None],
    *,
    force: bool = False,
    reuse: bool = False,
) -> bool:
    """Run ``body`` unless outputs exist. Returns False when a matching
    earlier run was reused (only with ``reuse=True``)."""
    for p in inputs:
        if not Path(p).exists():
            raise MissingInputError(str(p))
    digests = {_rel(layout, p): sha256_file(p) for p in inputs}
    chash = config_hash(config)
    present = [p for p in outputs if Path(p).exists()]
    if reuse and len(present) == len(outputs) and manifest.exists():
        old = json.loads(manifest.read_text())
        if old.get("config_hash") == chash and old.get("inputs") == digests:
            log.info("%s: reusing outputs in %s", name, _rel(layout, manifest.parent))
            return False
    if present and not force:
        raise OutputExistsError(f"{name}: {present[0]} exists; pass --force to overwrite")
    manifest.parent.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    body()
    record = {
        "stage": name,
        "config": config,
        "config_hash": chash,
        "seed": seed,
        "inputs": digests,
        "outputs": {_rel(layout, p): sha256_file(p) for p in outputs},
        "wall_seconds": round(time.perf_counter() - start, 3),
    }
    manifest.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    log.info("%s done in %.1fs", name, record["wall_seconds"])
    return True


# --- stages -------------------------------------------------------------------------

def stage_synth(cfg: PipelineConfig, *, force=False, reuse=False) -> bool:
    lay = Layout(cfg.workdir)
    scfg = cfg.synth_config()

    def body():
        data = cp.generate_synthetic(scfg)
        cp.write_catalog(lay.catalog, data.catalog)
        cp.write_queries(lay.queries, data.queries)
        cp.write_histories(lay.histories, data.histories)
        rq.write_embeddings(lay.embeddings, data.item_ids, data.semantic, data.collab)

    outputs = [lay.catalog, lay.queries, lay.histories, lay.embeddings]
    return run_stage(lay, "synth", lay.corpus / "manifest.json", [], outputs, dataclasses.asdict(scfg), cfg.seed, body, force=force, reuse=reuse)


def _rqvae_cfg(cfg: PipelineConfig, lay: Layout) -> rq.RqvaeConfig:
    with open(lay.embeddings, "rb") as fh:
        _, _, _, ds, dc = fh.readline().decode("ascii").split()
    return cfg.rqvae_config(int(ds), int(dc))


def stage_train_ids(cfg: PipelineConfig, *, force=False, reuse=False) -> bool:
    lay = Layout(cfg.workdir)
    if not lay.embeddings.exists():
        raise MissingInputError(str(lay.embeddings))
    rcfg = _rqvae_cfg(cfg, lay)

    def body():
        _, v_s, v_c = rq.read_embeddings(lay.embeddings)
        result = rq.train(rcfg, v_s, v_c, checkpoint=lay.rqvae)
        lay.rqvae_history.write_text(json.dumps(result.history, indent=1) + "\n")

    return run_stage(
        lay, "train-ids", lay.ids / "manifest.train.json", [lay.embeddings], [lay.rqvae, lay.rqvae_history],
        dataclasses.asdict(rcfg), cfg.seed, body, force=force, reuse=reuse,
    )


def load_rqvae(cfg: PipelineConfig, lay: Layout) -> rq.RqVae:
    model = rq.RqVae.init(_rqvae_cfg(cfg, lay), np.random.default_rng(0))
    model.load(lay.rqvae)
    return model


def stage_export_ids(cfg: PipelineConfig, *, force=False, reuse=False) -> bool:
    lay = Layout(cfg.workdir)
    inputs = [lay.rqvae, lay.embeddings, lay.catalog, lay.queries]

    def body():
        model = load_rqvae(cfg, lay)
        items, v_s, v_c = rq.read_embeddings(lay.embeddings)
        write_identifiers(lay.identifiers, rq.export_identifiers(model, items.tolist(), v_s, v_c))
        words = cp.corpus_words(cp.read_catalog(lay.catalog), cp.read_queries(lay.queries))
        r = model.cfg
        TokenVocabulary.build(r.shared_levels, r.specific_levels, r.codebook_size, words).save(lay.vocab)

    config = {"rqvae": cfg.rqvae}
    return run_stage(lay, "export-ids", lay.ids / "manifest.export.json", inputs, [lay.identifiers, lay.vocab], config, cfg.seed, body, force=force, reuse=reuse)


def _load_common(lay: Layout):
    identifiers = {i.item_id: i for i in read_identifiers(lay.identifiers)}
    queries = {q.query: q for q in cp.read_queries(lay.queries)}
    histories = cp.read_histories(lay.histories)
    return identifiers, queries, histories


def _write_eval_rows(path, rows: Iterable[cp.EvalRow], examples: Iterable[cp.InstructionExample], vocab: TokenVocabulary) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row, ex in zip(rows, examples):
            rec = dataclasses.asdict(row)
            rec["instruction"] = vocab.encode(ex.instruction)
            fh.write(json.dumps(rec) + "\n")


def _read_eval_rows(path):
    rows, instructions = [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                instructions.append(rec.pop("instruction"))
                rows.append(cp.EvalRow(**rec))
    return rows, instructions


def stage_build_data(cfg: PipelineConfig, *, force=False, reuse=False) -> bool:
    lay = Layout(cfg.workdir)
    out = lay.data(cfg.flags.variant)
    inputs = [lay.identifiers, lay.vocab, lay.catalog, lay.queries, lay.histories]
    outputs = [out / "train.jsonl", out / "valid.jsonl", out / "test.jsonl"]
    wb = cfg.flags.behavior_token

    def body():
        identifiers, queries, histories = _load_common(lay)
        vocab = TokenVocabulary.load(lay.vocab)
        catalog = cp.read_catalog(lay.catalog)
        sp = cp.split(histories)
        train = cp.build_instructions(histories, sp, identifiers, catalog, queries, cfg.flags.tasks, with_behavior=wb)
        cp.write_instructions(outputs[0], train, vocab)
        by_user = {h.user: h for h in histories}
        valid = [cp.eval_example(r, by_user, identifiers, queries, with_behavior=wb) for r in sp.valid]
        cp.write_instructions(outputs[1], valid, vocab)
        test = [cp.eval_example(r, by_user, identifiers, queries, with_behavior=wb) for r in sp.test]
        _write_eval_rows(outputs[2], sp.test, test, vocab)
        counts = {t: sum(ex.task == t for ex in train) for t in cp.TASKS}
        log.info("training examples per task: %s", counts)

    config = {"tasks": dataclasses.asdict(cfg.flags)}
    return run_stage(lay, "build-data", out / "manifest.json", inputs, outputs, config, cfg.seed, body, force=force, reuse=reuse)


def _examples(path, vocab_size: int) -> List[sm.Example]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                r = json.loads(line)
                out.append(sm.Example(r["task"], r["instruction"], r["response"], r.get("item")))
    return out


def stage_train_model(cfg: PipelineConfig, *, force=False, reuse=False) -> bool:
    lay = Layout(cfg.workdir)
    variant = cfg.flags.variant
    data, out = lay.data(variant), lay.model(variant)
    inputs = [lay.vocab, data / "train.jsonl", data / "valid.jsonl"]
    ckpt = out / "model.gsnm"
    outputs = [ckpt, Path(f"{ckpt}.config.json"), out / "train_log.csv"]
    if not lay.vocab.exists():
        raise MissingInputError(str(lay.vocab))
    vocab = TokenVocabulary.load(lay.vocab)
    mcfg = cfg.model_config(len(vocab))

    def body():
        specials = sm.Specials(vocab.pad_id, vocab.bos_id, vocab.eos_id)
        train = _examples(inputs[1], len(vocab))
        valid = _examples(inputs[2], len(vocab))
        sm.train_model(mcfg, train, specials, valid=valid, checkpoint=ckpt, log_path=outputs[2])

    config = {"model": dataclasses.asdict(mcfg), "variant": variant}
    return run_stage(lay, "train-model", out / "manifest.json", inputs, outputs, config, cfg.seed, body, force=force, reuse=reuse)


def candidate_lists(cfg: PipelineConfig, lay: Layout, rows, histories) -> List[de.CandidateList]:
    catalog = cp.read_catalog(lay.catalog)
    queries = cp.read_queries(lay.queries)
    index = de.description_index([c.description for c in catalog])
    return de.build_candidate_lists(
        rows,
        {h.user: h for h in histories},
        len(catalog),
        seed=cfg.seed,
        negatives=cfg.eval.negatives,
        index=index,
        query_words={q.query: q.words for q in queries},
    )


def stage_evaluate(cfg: PipelineConfig, *, force=False, reuse=False) -> bool:
    lay = Layout(cfg.workdir)
    variant, neg = cfg.flags.variant, cfg.eval.negatives
    ckpt = lay.model(variant) / "model.gsnm"
    test = lay.data(variant) / "test.jsonl"
    inputs = [ckpt, test, lay.identifiers, lay.vocab, lay.catalog, lay.queries, lay.histories]
    rep = lay.reports(variant)
    outputs = [rep / f"candidates_{neg}.jsonl", lay.eval_report(variant, neg)]
    if cfg.eval.beam_width:
        outputs.append(rep / f"generation_{neg}.json")  # identical for either negatives mode

    def body():
        identifiers, _, histories = _load_common(lay)
        vocab = TokenVocabulary.load(lay.vocab)
        model = sm.load_model(ckpt)
        rows, instructions = _read_eval_rows(test)
        lists = candidate_lists(cfg, lay, rows, histories)
        de.write_candidate_lists(outputs[0], lists)
        report, _ = de.evaluate_rows(model, instructions, lists, identifiers, vocab, with_behavior=cfg.flags.behavior_token)
        write_report(outputs[1], report)
        if cfg.eval.beam_width:
            gen = generation_report(model, rows, instructions, identifiers, vocab, cfg.eval.beam_width, cfg.flags.behavior_token)
            write_report(outputs[2], gen)

    config = {"eval": dataclasses.asdict(cfg.eval), "variant": variant}
    return run_stage(lay, "evaluate", rep / f"manifest.{neg}.json", inputs, outputs, config, cfg.seed, body, force=force, reuse=reuse)


def generation_report(model, rows, instructions, identifiers, vocab, beam_width: int, with_behavior: bool) -> dict:
    """Hit ratio of trie-constrained generation over the whole catalog."""
    tries = {
        task: de.IdentifierTrie.from_identifiers(identifiers.values(), vocab, kind) for task, (_, kind) in de.TASK_SETUP.items()
    }
    ks = [k for k in de.METRIC_KS if k <= beam_width]
    hits: Dict[str, List[Optional[int]]] = {}
    for row, ins in zip(rows, instructions):
        behavior, _ = de.TASK_SETUP[row.task]
        found = de.constrained_beam_search(
            model, ins, behavior if with_behavior else None, tries[row.task], vocab, beam_width=beam_width
        )
        hits.setdefault(row.task, []).append(de.rank_of([h.item for h in found], row.target))
    out = {}
    for task, ranks in sorted(hits.items()):
        block = {f"HR@{k}": float(np.mean([r is not None and r <= k for r in ranks])) for k in ks}
        block["n_rows"] = len(ranks)
        block["beam_width"] = beam_width
        out[task] = block
    return out


def write_report(path, report: dict) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")


def collision_report(cfg: PipelineConfig, *, baselines: bool = False, force: bool = False) -> dict:
    """Collision rates of the exported identifiers; with ``baselines``, also
    of semantic-only and collaborative-only quantizers trained under the same
    settings."""
    lay = Layout(cfg.workdir)
    inputs = [lay.identifiers] + ([lay.embeddings] if baselines else [])
    result: dict = {}

    def body():
        idents = read_identifiers(lay.identifiers)
        result.update(
            n_items=len(idents),
            joint_semantic=collision_rate([i.semantic_codes for i in idents]),
            joint_collab=collision_rate([i.collab_codes for i in idents]),
            shared_only=collision_rate([i.shared for i in idents]),
        )
        if baselines:
            rcfg = _rqvae_cfg(cfg, lay)
            _, v_s, v_c = rq.read_embeddings(lay.embeddings)
            for name, v in (("semantic_only", v_s), ("collab_only", v_c)):
                model = rq.train_single(rcfg, v).model
                result[name] = collision_rate([tuple(c) for c in model.codes(v)])
        write_report(lay.collision, result)

    run_stage(lay, "collision-report", lay.collision.parent / "manifest.collision.json", inputs, [lay.collision],
              {"baselines": baselines, "rqvae": cfg.rqvae}, cfg.seed, body, force=force)
    return json.loads(lay.collision.read_text())


def run_all(cfg: PipelineConfig, *, force=False, reuse=False) -> dict:
    """Every stage from corpus generation to the evaluation report."""
    for stage in (stage_synth, stage_train_ids, stage_export_ids, stage_build_data, stage_train_model, stage_evaluate):
        stage(cfg, force=force, reuse=reuse)
    return json.loads(Layout(cfg.workdir).eval_report(cfg.flags.variant, cfg.eval.negatives).read_text())


ABLATIONS = ("none", "no-nrip", "no-nsqp", "no-nsip", "no-desc2id", "no-id2desc", "no-behavior")


def ablation_flags(name: str) -> TaskFlags:
    if name not in ABLATIONS:
        raise ConfigError(f"unknown ablation {name!r}; choose from {', '.join(ABLATIONS)}")
    flags = TaskFlags()
    if name == "no-behavior":
        flags.behavior_token = False
    elif name != "none":
        setattr(flags, name[3:], False)
    return flags


def ablate(cfg: PipelineConfig, names: Sequence[str], *, force=False) -> Dict[str, dict]:
    """Run build-data, train-model and evaluate per ablation (reusing
    matching earlier outputs) and collect the reports, baseline first."""
    for stage in (stage_synth, stage_train_ids, stage_export_ids):
        stage(cfg, force=False, reuse=True)
    reports = {}
    for name in ["none"] + [n for n in names if n != "none"]:
        run = dataclasses.replace(cfg, flags=ablation_flags(name))
        for stage in (stage_build_data, stage_train_model, stage_evaluate):
            stage(run, force=force, reuse=not force)
        reports[name] = json.loads(Layout(cfg.workdir).eval_report(run.flags.variant, cfg.eval.negatives).read_text())
    table = ablation_table(reports)
    (Layout(cfg.workdir).root / "reports" / "ablation.json").write_text(json.dumps(table, indent=2, sort_keys=True) + "\n")
    return table


def ablation_table(reports: Mapping[str, dict]) -> Dict[str, dict]:
    """HR@5/NDCG@5 per ablation plus relative change against ``none``."""
    base = reports["none"]
    table = {}
    for name, rep in reports.items():
        row = {}
        for task, block in rep.items():
            for metric in ("HR@5", "NDCG@5"):
                value = block[metric]
                ref = base[task][metric]
                row[f"{task}.{metric}"] = value
                row[f"{task}.{metric}.rel_change"] = (value - ref) / ref if ref else 0.0
        table[name] = row
    return table

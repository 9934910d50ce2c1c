import hashlib
import json
import time
import warnings
from dataclasses import asdict, dataclass, field
from enum import Enum
from importlib import metadata
from pathlib import Path
from typing import Dict, List, Literal, Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, PositiveInt, ValidationError, model_validator
from rich.console import Console
from rich.markup import escape
from rich.panel import Panel
from rich.progress import Progress, SpinnerColumn, TextColumn
from rich.table import Table

from cluster import (
    DEFAULT_LONG_TAILED,
    Preprocessor,
    adjusted_rand_index,
    centroid_summary,
    elbow_select,
    fit_pca,
    kmeans_fit,
    stability,
    transform_pca,
)
from contextual import (
    adoption_table,
    contextual_comparisons,
    monthly_trends,
    session_frame,
    type_shares,
    usage_summary,
    weekly_distribution,
)
from errors import InputError, StageError
from features import CORE_FEATURES, EXTENDED_FEATURES, featurize_sessions, write_features
from ingest import Corpus, build_corpus, drop_out_of_window, load_context, parse_turn_files, validate_corpus
from lexicon import CompiledLexicon, LexiconConfig, load_lexicon
from plots import render_transitions
from procmine import build_sequences, fit_fomm, matrix_diff, subgroup_fomm, write_matrix
from sessionizer import (
    HeuristicTopicDetector,
    SegmentationConfig,
    Session,
    TopicDetector,
    boundaries_from_sessions,
    evaluate_segmentation,
    gold_from_page_context,
    pooled_score,
    segment_corpus,
)
from stats import stats_frame
from topic_detector import DetectorConfig, RemoteTopicDetector, resolve_detector_url

console = Console()

FLOAT_FORMAT = "%.10g"
TRACKED_PACKAGES = ("numpy", "pandas", "scikit-learn", "scipy", "joblib", "pydantic", "matplotlib")


class Stage(Enum):
    INGEST = "ingest"
    SEGMENT = "segment"
    FEATURIZE = "featurize"
    CLUSTER = "cluster"
    MINE = "mine"
    STATS = "stats"


STAGE_ORDER = list(Stage)


class ClusterSettings(BaseModel):
    long_tailed_columns: List[str] = Field(default_factory=lambda: list(DEFAULT_LONG_TAILED))
    pca_components: Optional[PositiveInt] = 6
    pca_variance: Optional[float] = Field(default=None, gt=0, le=1)
    pca_scale: bool = False
    k: Optional[int] = Field(default=None, ge=2)
    k_range: List[int] = Field(default_factory=lambda: list(range(2, 11)))
    stability_runs: PositiveInt = 50
    use_extended_features: bool = False

    @model_validator(mode="after")
    def _check(self) -> "ClusterSettings":
        if self.pca_variance is not None:
            self.pca_components = None
        if self.k is None and len(self.k_range) < 3:
            raise ValueError("k_range needs at least 3 values when k is not fixed")
        return self


class PipelineConfig(BaseModel):
    turns: List[Path]
    context: Path
    lexicon: Optional[Path] = None
    lexicon_config: LexiconConfig = Field(default_factory=LexiconConfig)
    segmentation: SegmentationConfig = Field(default_factory=SegmentationConfig)
    cluster: ClusterSettings = Field(default_factory=ClusterSettings)
    label_map: Dict[int, str] = Field(default_factory=dict)
    subgroups: List[Literal["discipline", "selectivity"]] = Field(
        default_factory=lambda: ["discipline", "selectivity"]
    )
    seed: int = 0
    threads: PositiveInt = 1
    output_dir: Path = Path("out")
    drop_out_of_window: bool = False
    detector_url: Optional[str] = None
    detector_timeout_s: float = Field(default=10.0, gt=0)
    detector_max_in_flight: PositiveInt = 8

    @model_validator(mode="after")
    def _check_labels(self) -> "PipelineConfig":
        if self.label_map and self.cluster.k is not None:
            if sorted(self.label_map) != list(range(self.cluster.k)):
                raise ValueError(f"label_map keys must cover 0..{self.cluster.k - 1}")
        if len(set(self.label_map.values())) != len(self.label_map):
            raise ValueError("label_map names must be distinct")
        return self

    def canonical_json(self) -> str:
        # threads and output location do not change results
        payload = self.model_dump(mode="json", exclude={"threads", "output_dir"})
        return json.dumps(payload, sort_keys=True, separators=(",", ":"))

    def sha256(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()


def load_config(path: Path, **overrides) -> PipelineConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise InputError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise InputError(f"config file is not valid JSON: {path}: {e}") from e

    base = path.parent
    raw["turns"] = [str(base / p) for p in raw.get("turns", [])]
    for key in ("context", "lexicon", "output_dir"):
        if raw.get(key) is not None:
            raw[key] = str(base / raw[key])
    raw.update({k: v for k, v in overrides.items() if v is not None})
    config = PipelineConfig.model_validate(raw)
    return config.model_copy(update={"detector_url": resolve_detector_url(config.detector_url)})


def check_inputs(config: PipelineConfig) -> None:
    for path in [*config.turns, config.context, *([config.lexicon] if config.lexicon else [])]:
        if not Path(path).exists():
            raise InputError(f"input path does not exist: {path}")


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 16), b""):
            digest.update(block)
    return digest.hexdigest()


def package_versions() -> Dict[str, str]:
    versions = {}
    for name in TRACKED_PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = "unknown"
    return versions


@dataclass
class StageTiming:
    stage: str
    seconds: float
    rows: int


@dataclass
class RunReport:
    output_dir: Path
    stages: List[str] = field(default_factory=list)
    n_turns: int = 0
    n_sessions: int = 0
    k: Optional[int] = None
    mean_ari: Optional[float] = None
    boundary_f1: Optional[float] = None
    fallbacks: int = 0
    timings: List[StageTiming] = field(default_factory=list)
    artifacts: List[Path] = field(default_factory=list)


class EngagementPipeline:
    """Runs ingest → segment → featurize → cluster → mine → stats and writes the artifact tree."""

    def __init__(self, config: PipelineConfig, detector: Optional[TopicDetector] = None):
        self.config = config
        self.status: Optional[Stage] = None
        self.out = Path(config.output_dir)
        self.detector = detector or self._build_detector()
        self.fallbacks: List[str] = []
        self.corpus: Optional[Corpus] = None
        self.lexicon: Optional[CompiledLexicon] = None
        self.sessions: List[Session] = []
        self.features: Optional[pd.DataFrame] = None
        self.assignments: Optional[pd.DataFrame] = None
        self.label_map: Dict[int, str] = dict(config.label_map)
        self.report = RunReport(output_dir=self.out)

    def _build_detector(self) -> TopicDetector:
        if self.config.detector_url:
            return RemoteTopicDetector(
                DetectorConfig(
                    url=self.config.detector_url,
                    timeout=self.config.detector_timeout_s,
                    max_in_flight=self.config.detector_max_in_flight,
                )
            )
        return HeuristicTopicDetector(self.config.segmentation.heuristic_similarity_threshold)

    def run(self, until: Stage = Stage.STATS, show_report: bool = True) -> RunReport:
        check_inputs(self.config)
        try:
            self.out.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise InputError(f"cannot create output directory {self.out}: {e}") from e
        handlers = {
            Stage.INGEST: self._ingest,
            Stage.SEGMENT: self._segment,
            Stage.FEATURIZE: self._featurize,
            Stage.CLUSTER: self._cluster,
            Stage.MINE: self._mine,
            Stage.STATS: self._stats,
        }
        stages = STAGE_ORDER[: STAGE_ORDER.index(until) + 1]

        with Progress(SpinnerColumn(), TextColumn("[progress.description]{task.description}"), console=console) as progress:
            for stage in stages:
                task = progress.add_task(f"[cyan]{stage.value}...", total=1)
                self.status = stage
                started = time.perf_counter()
                try:
                    with warnings.catch_warnings(record=True) as caught:
                        warnings.simplefilter("always")
                        rows = handlers[stage]()
                except InputError:
                    raise
                except Exception as e:
                    raise StageError(stage.value, e) from e
                for w in caught:
                    console.print(f"[yellow]Warning: {escape(f'[{stage.value}] {w.message}')}[/yellow]")
                self.report.timings.append(StageTiming(stage.value, time.perf_counter() - started, rows))
                self.report.stages.append(stage.value)
                progress.update(task, completed=1)

        try:
            self._write_manifest()
        except OSError as e:
            raise StageError("manifest", e) from e
        if show_report:
            self._display_report()
        return self.report

    def _csv(self, frame: pd.DataFrame, name: str, index: bool = False) -> Path:
        path = self.out / name
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=index, float_format=FLOAT_FORMAT, lineterminator="\n")
        return path

    def _json(self, payload: Dict, name: str) -> Path:
        path = self.out / name
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    def _ingest(self) -> int:
        parsed = parse_turn_files(self.config.turns, self.config.threads)
        for problem in parsed.problems[:20]:
            console.print(f"[yellow]Warning: skipped record {problem}[/yellow]")
        if parsed.skipped:
            console.print(f"[yellow]Warning: {parsed.skipped} malformed records skipped[/yellow]")
        try:
            context, events, calendar = load_context(self.config.context)
            lexicon = load_lexicon(self.config.lexicon) if self.config.lexicon else self.config.lexicon_config
        except ValidationError as e:
            raise InputError(f"invalid context or lexicon document: {e}") from e
        self.lexicon = lexicon.compile()

        corpus = build_corpus(parsed.turns, context, events, calendar)
        report = validate_corpus(corpus)
        for name, count in report.counts.items():
            if count:
                console.print(f"[yellow]Warning: {count} turns flagged as {name}[/yellow]")
        if self.config.drop_out_of_window:
            corpus, dropped = drop_out_of_window(corpus)
            if dropped:
                console.print(f"[yellow]Warning: dropped {dropped} turns outside the semester[/yellow]")
        self.corpus = corpus
        self.report.n_turns = len(corpus.turns)
        console.print(f"[green]✓[/green] Ingested {len(corpus.turns)} turns")
        return len(corpus.turns)

    def _segment(self) -> int:
        self.sessions = segment_corpus(
            self.corpus, self.config.segmentation, self.detector, self.config.threads, self.fallbacks
        )
        if self.fallbacks:
            console.print(
                f"[yellow]Warning: topic detector unavailable for {len(self.fallbacks)} chunks, "
                f"heuristic used[/yellow]"
            )
        self.report.fallbacks = len(self.fallbacks)

        rows = [
            {
                "session_id": s.session_id,
                "enrollment_id": s.enrollment_id,
                "class_id": s.class_id,
                "start": s.start.isoformat(),
                "end": s.end.isoformat(),
                "num_turns": s.num_turns,
                "first_turn_id": s.turns[0].turn_id,
                "last_turn_id": s.turns[-1].turn_id,
            }
            for s in self.sessions
        ]
        self.report.artifacts.append(self._csv(pd.DataFrame(rows), "sessions.csv"))
        self._evaluate_segmentation()
        console.print(f"[green]✓[/green] Segmented {len(self.corpus.turns)} turns into {len(self.sessions)} sessions")
        return len(self.corpus.turns)

    def _evaluate_segmentation(self) -> None:
        by_enrollment: Dict[str, List[Session]] = {}
        for session in self.sessions:
            by_enrollment.setdefault(session.enrollment_id, []).append(session)
        rows, scores = [], []
        for enrollment_id, turns in self.corpus.by_enrollment():
            gold = gold_from_page_context(turns)
            predicted = boundaries_from_sessions(by_enrollment[enrollment_id])
            score = evaluate_segmentation(predicted, gold, gold.n_gaps)
            scores.append(score)
            rows.append({"enrollment_id": enrollment_id, **asdict(score)})
        pooled = pooled_score(scores)
        rows.append({"enrollment_id": "ALL", **asdict(pooled)})
        self.report.boundary_f1 = pooled.f1 if pooled.n_gold else None
        self.report.artifacts.append(self._csv(pd.DataFrame(rows), "segmentation_eval.csv"))

    def _featurize(self) -> int:
        table = featurize_sessions(self.sessions, self.corpus, self.lexicon, self.config.threads)
        if table.outside_calendar:
            console.print(
                f"[yellow]Warning: {len(table.outside_calendar)} sessions start outside the semester "
                f"calendar and were dropped[/yellow]"
            )
        kept = set(table.frame.index)
        self.sessions = [s for s in self.sessions if s.session_id in kept]
        self.features = table.frame
        self.report.n_sessions = len(self.sessions)
        self.report.artifacts.append(write_features(table.frame, self.out / "features.csv"))
        console.print(f"[green]✓[/green] Featurized {len(table.frame)} sessions")
        return len(table.frame)

    def _cluster(self) -> int:
        settings = self.config.cluster
        matrix = self.features[list(CORE_FEATURES)]
        preprocessor = Preprocessor.fit(matrix, settings.long_tailed_columns)
        standardized = preprocessor.transform(matrix)
        n_components = min(settings.pca_components, matrix.shape[1]) if settings.pca_components else None
        pca = fit_pca(standardized, n_components=n_components, variance_target=settings.pca_variance,
                      scale=settings.pca_scale)
        scores = transform_pca(pca, standardized)

        k = settings.k
        if len(settings.k_range) >= 3:
            elbow = elbow_select(scores, settings.k_range, seed=self.config.seed, threads=self.config.threads)
            self.report.artifacts.append(self._csv(elbow.to_frame(), "elbow.csv"))
            if k is None:
                k = elbow.chosen_k
        if self.label_map and sorted(self.label_map) != list(range(k)):
            raise ValueError(f"label_map keys must cover 0..{k - 1}")
        if not self.label_map:
            self.label_map = {i: f"type_{i}" for i in range(k)}

        model, labels = kmeans_fit(scores, k, self.config.seed)
        report = stability(scores, k, settings.stability_runs, threads=self.config.threads)
        self.report.k = k
        self.report.mean_ari = report.mean_ari

        self.assignments = pd.DataFrame(
            {"cluster": labels, "engagement_type": [self.label_map[int(c)] for c in labels]},
            index=pd.Index(matrix.index, name="session_id"),
        )
        self.report.artifacts.append(self._csv(self.assignments, "assignments.csv", index=True))

        centroids = centroid_summary(model, labels, standardized)
        centroids.insert(0, "engagement_type", [self.label_map[i] for i in centroids.index])
        self.report.artifacts.append(self._csv(centroids, "centroids.csv", index=True))

        metrics = [
            ("k", k),
            ("n_runs", report.n_runs),
            ("mean_ari", report.mean_ari),
            ("sd_ari", report.sd_ari),
            ("reference_seed", report.reference_seed),
        ]
        if settings.use_extended_features:
            robustness = self._robustness_ari(k, settings)
            if robustness is not None:
                metrics.append(("robustness_ari", robustness))
        self.report.artifacts.append(self._csv(pd.DataFrame(metrics, columns=["metric", "value"]), "stability.csv"))

        self.report.artifacts.append(
            self._json({"preprocessor": preprocessor.to_dict(), "pca": pca.to_dict()}, "pca_model.json")
        )
        self.report.artifacts.append(self._json(model.to_dict(), "kmeans_model.json"))
        console.print(
            f"[green]✓[/green] Clustered {len(matrix)} sessions into {k} types "
            f"(stability ARI {report.mean_ari:.3f} ± {report.sd_ari:.3f})"
        )
        return len(matrix)

    def _robustness_ari(self, k: int, settings: ClusterSettings) -> Optional[float]:
        complete = self.features.dropna(subset=list(EXTENDED_FEATURES))
        if len(complete) <= k:
            console.print("[yellow]Warning: too few sessions with extended features for the robustness check[/yellow]")
            return None
        labelings = []
        for columns in (CORE_FEATURES, (*CORE_FEATURES, *EXTENDED_FEATURES)):
            matrix = complete[list(columns)]
            standardized = Preprocessor.fit(matrix, settings.long_tailed_columns).transform(matrix)
            n_components = min(settings.pca_components, matrix.shape[1]) if settings.pca_components else None
            pca = fit_pca(standardized, n_components=n_components, variance_target=settings.pca_variance)
            _, labels = kmeans_fit(transform_pca(pca, standardized), k, self.config.seed)
            labelings.append(labels)
        return adjusted_rand_index(*labelings)

    def _mine(self) -> int:
        assigned = self.assignments["cluster"].to_dict()
        sequences = build_sequences(assigned, self.sessions, self.label_map)
        labels = [self.label_map[i] for i in sorted(self.label_map)]
        matrix = fit_fomm(sequences, labels, threads=self.config.threads)
        self.report.artifacts.extend(write_matrix(matrix, self.out / "transitions"))
        self.report.artifacts.append(render_transitions(matrix.counts_frame(), self.out / "transitions.svg"))

        class_of = {s.enrollment_id: s.class_id for s in self.sessions}
        for dimension in self.config.subgroups:
            grouping = {seq.enrollment_id: self._dimension_of(class_of[seq.enrollment_id], dimension) for seq in sequences}
            matrices = subgroup_fomm(sequences, grouping, labels)
            for value, sub in matrices.items():
                self.report.artifacts.extend(write_matrix(sub, self.out / "subgroups" / f"{dimension}={value}"))
            if len(matrices) == 2:
                (name_a, a), (name_b, b) = matrices.items()
                diff = matrix_diff(a, b)
                self.report.artifacts.append(self._csv(diff, f"subgroups/{dimension}_{name_a}_minus_{name_b}.csv"))
        console.print(f"[green]✓[/green] Mined transitions over {len(sequences)} enrollment sequences")
        return len(sequences)

    def _dimension_of(self, class_id: str, dimension: str) -> str:
        context = self.corpus.context
        if dimension == "discipline":
            return context.discipline_of(class_id).value
        return context.selectivity_of(class_id).value

    def _stats(self) -> int:
        adoption = adoption_table(self.corpus, self.sessions)
        self.report.artifacts.append(self._csv(adoption, "adoption.csv"))
        self.report.artifacts.append(self._csv(monthly_trends(self.sessions), "monthly_trends.csv"))
        labels = self.assignments["engagement_type"]
        self.report.artifacts.append(self._csv(weekly_distribution(self.features, labels), "weekly_distribution.csv"))

        frame = session_frame(self.sessions, self.corpus, self.features, labels)
        self.report.artifacts.append(self._csv(type_shares(frame, self.config.subgroups), "type_shares.csv"))

        two_way = bool(self.corpus.context.students)
        comparisons = contextual_comparisons(adoption, frame, self.config.subgroups, two_way=two_way)
        for skipped in comparisons.skipped:
            console.print(f"[yellow]Warning: comparison skipped: {skipped}[/yellow]")
        self.report.artifacts.append(self._csv(stats_frame(comparisons.rows), "stats.csv"))

        summary = usage_summary(adoption)
        console.print(
            f"[green]✓[/green] Adoption {summary['adoption_rate']:.1%} of {summary['n_enrollments']} enrollments; "
            f"{len(comparisons.rows)} contextual comparisons"
        )
        return len(frame)

    def _write_manifest(self) -> None:
        artifacts = sorted(
            p for p in self.out.rglob("*")
            if p.is_file() and p.name not in ("manifest.json", "bench.csv") and "figures" not in p.parts
        )
        manifest = {
            "config_sha256": self.config.sha256(),
            "seeds": {
                "seed": self.config.seed,
                "stability_seeds": list(range(self.config.cluster.stability_runs)),
            },
            "stages": self.report.stages,
            "versions": package_versions(),
            "artifacts": {str(p.relative_to(self.out)): sha256_file(p) for p in artifacts},
        }
        self._json(manifest, "manifest.json")

    def _display_report(self) -> None:
        report = self.report
        table = Table(title="Run Report", show_header=True, header_style="bold magenta")
        table.add_column("Metric", style="cyan", no_wrap=True)
        table.add_column("Value", style="green")
        table.add_row("Stages", " → ".join(report.stages))
        table.add_row("Turns", str(report.n_turns))
        if report.n_sessions:
            table.add_row("Sessions", str(report.n_sessions))
        if report.boundary_f1 is not None:
            table.add_row("Boundary F1 (page gold)", f"{report.boundary_f1:.3f}")
        if report.k is not None:
            table.add_row("Engagement types", str(report.k))
            table.add_row("Stability ARI", f"{report.mean_ari:.3f}")
        table.add_row("Detector fallbacks", str(report.fallbacks))
        table.add_row("Output", str(report.output_dir))
        console.print(table)


def run_bench(config: PipelineConfig, detector: Optional[TopicDetector] = None) -> pd.DataFrame:
    console.print(Panel.fit("[bold cyan]Engagement pipeline benchmark[/bold cyan]", border_style="cyan"))
    started = time.perf_counter()
    report = EngagementPipeline(config, detector).run(show_report=False)
    total = time.perf_counter() - started
    rows = [
        {"stage": t.stage, "seconds": t.seconds, "rows": t.rows, "rows_per_sec": t.rows / t.seconds if t.seconds else np.nan}
        for t in report.timings
    ]
    rows.append({"stage": "total", "seconds": total, "rows": report.n_turns,
                 "rows_per_sec": report.n_turns / total if total else np.nan})
    frame = pd.DataFrame(rows, columns=["stage", "seconds", "rows", "rows_per_sec"])
    frame.to_csv(Path(config.output_dir) / "bench.csv", index=False, float_format="%.6g", lineterminator="\n")

    table = Table(title="Bench", show_header=True, header_style="bold magenta")
    for column in ("Stage", "Seconds", "Rows", "Rows/s"):
        table.add_column(column, style="cyan" if column == "Stage" else "green")
    for row in rows:
        table.add_row(row["stage"], f"{row['seconds']:.3f}", str(row["rows"]), f"{row['rows_per_sec']:.0f}")
    console.print(table)
    return frame

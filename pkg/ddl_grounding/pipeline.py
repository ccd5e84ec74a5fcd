"""End-to-end orchestration of a grounding run.

A run optimizes the instruction on the development split, grounds every test
image on the reference view and on M perturbed views, consolidates the
back-projected boxes and evaluates the result. All artifacts go through one
ArtifactWriter so they are written in manifest order.
"""

import hashlib
import json
import logging
import math
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

from . import dape
from .config import LINGUISTIC, VISUAL
from .consolidation import ConsolidatedDetection, consolidate
from .errors import DDLError, DegenerateResult, InsufficientData
from .evalcal import (
    SPLIT_MEDIAN,
    SPLIT_NONE,
    THRESHOLDS,
    EvalSample,
    calibration,
    calibration_pairs,
    evaluate,
    improvement_table,
    kde,
    kde_by_generation,
    metric_name,
    top_k_trajectory,
)
from .geometry import BoundingBox, TransformSpec, invert_transform
from .lvlm_client import (
    ChatCompletionsClient,
    Detection,
    DetectionSet,
    ScriptedMetaClient,
    ground,
    mock_ground,
)
from .run_logging import run_log_handler
from .viewgen import RasterImage, make_roster, render_view

log = logging.getLogger(__name__)

CONFIG_FILE = 'config.json'
HISTORY_FILE = 'dape_history.jsonl'
PREDICTIONS_FILE = 'predictions.jsonl'
REPORT_FILE = 'report.json'
FAILURES_FILE = 'failures.jsonl'
LOG_FILE = 'run.log'
COMPARISON_FILE = 'comparison.json'
ANALYSIS_FILE = 'analysis.json'

PURPOSE_SCORE = 'score'
PURPOSE_INFER = 'infer'

LINGUISTIC_TEMPERATURE = 1.0
SIGMA_DIGITS = 6
TRUE_POSITIVE_IOU = 0.5


def derive_seed(*parts):
    """Derive a 64-bit seed from arbitrary parts."""
    key = ':'.join(str(p) for p in parts).encode('utf-8')
    return int.from_bytes(hashlib.sha256(key).digest()[:8], 'big')


class ArtifactWriter(object):
    """Single writer of every file in a run directory.

    The first write to a file truncates it; later line writes append.
    """

    def __init__(self, output_dir):
        """Create the run directory.

        :param output_dir: run directory path
        """
        self.output_dir = output_dir
        os.makedirs(output_dir, exist_ok=True)
        self._lock = threading.Lock()
        self._started = set()

    def path(self, name):
        """Absolute path of an artifact."""
        return os.path.join(self.output_dir, name)

    def _open(self, name):
        mode = 'a' if name in self._started else 'w'
        self._started.add(name)
        return open(self.path(name), mode, encoding='utf-8')

    def write_json(self, name, payload):
        """Write one JSON document."""
        with self._lock:
            self._started.discard(name)
            with self._open(name) as fh:
                json.dump(payload, fh, indent=2, sort_keys=True)
                fh.write('\n')

    def append_jsonl(self, name, rows):
        """Append JSON lines, creating the file on first use."""
        with self._lock:
            with self._open(name) as fh:
                for row in rows:
                    fh.write(json.dumps(row, sort_keys=True) + '\n')

    def write_log(self, line):
        """Append one line to ``run.log``."""
        with self._lock:
            with self._open(LOG_FILE) as fh:
                fh.write(line + '\n')


class EndpointGrounder(object):
    """Ground views through a chat-completions endpoint."""

    concurrent = True

    def __init__(self, client):
        """Initialize the grounder.

        :param client: ChatCompletionsClient of the target model
        """
        self.client = client

    def load(self, entry):
        """Read the image of a manifest entry."""
        return RasterImage.open(entry.image_path)

    def dims(self, entry, image):
        """Dimensions of the loaded image."""
        return image.dims

    def __call__(self, entry, image, dims, spec, prompt, view_index=0,
                 temperature=None, purpose=PURPOSE_INFER):
        """Render one view and ground it."""
        view = render_view(image, spec)
        return ground(self.client, view, prompt, view_index=view_index,
                      temperature=temperature)


@dataclass(frozen=True)
class GroundCall(object):
    """One simulated grounding request."""

    image_id: str
    view_index: int
    temperature: float
    purpose: str
    prompt: str


class MockGrounder(object):
    """Ground views with the deterministic mock LVLM.

    Every call is recorded in ``calls`` so request budgets can be checked.
    """

    concurrent = False

    def __init__(self, noise, seed):
        """Initialize the grounder.

        :param noise: MockNoise
        :param seed:  run seed
        """
        self.noise = noise
        self.seed = seed
        self.calls = []
        self._lock = threading.Lock()

    def load(self, entry):
        """The mock never reads pixels."""
        return None

    def dims(self, entry, image):
        """Dimensions from the manifest, or from the image header."""
        if entry.dims is not None:
            return entry.dims
        return RasterImage.open(entry.image_path).dims

    def __call__(self, entry, image, dims, spec, prompt, view_index=0,
                 temperature=None, purpose=PURPOSE_INFER):
        """Simulate one grounding request."""
        temperature = temperature or 0.0
        with self._lock:
            self.calls.append(GroundCall(entry.image_id, view_index,
                                         temperature, purpose, prompt))
        return mock_ground(
            entry.ground_truth, spec, self.noise,
            derive_seed(self.seed, entry.image_id, view_index, purpose,
                        prompt),
            dims, view_index=view_index, temperature=temperature,
            label=entry.label or 'lesion',
            jitter_seed=derive_seed(self.seed, entry.image_id, 'jitter'))


class GatedGrounder(object):
    """Bound the grounding requests in flight across a whole run.

    Image workers and view workers all share the same slots, so nested
    thread pools never exceed ``limit`` concurrent requests.
    """

    def __init__(self, grounder, limit):
        """Wrap a grounder.

        :param grounder: grounder to delegate to
        :param limit:    maximum number of concurrent requests
        """
        self.grounder = grounder
        self.limit = limit
        self.concurrent = grounder.concurrent
        self._slots = threading.BoundedSemaphore(limit)

    def load(self, entry):
        """Delegate image loading."""
        return self.grounder.load(entry)

    def dims(self, entry, image):
        """Delegate dimension lookup."""
        return self.grounder.dims(entry, image)

    def __call__(self, *args, **kwargs):
        """Ground one view once a slot is free."""
        with self._slots:
            return self.grounder(*args, **kwargs)


def gate(grounder, limit):
    """Wrap ``grounder`` in a GatedGrounder unless it already is one."""
    if isinstance(grounder, GatedGrounder):
        return grounder
    return GatedGrounder(grounder, limit)


@dataclass
class ImageResult(object):
    """Outcome of grounding one image."""

    image_id: str
    detections: list = field(default_factory=list)
    stage: str = None
    error: str = None
    view_failures: int = 0
    clamped: int = 0
    dropped: int = 0

    @property
    def failed(self):
        """Whether the image is excluded from metrics."""
        return self.stage is not None

    def fail(self, stage, exc):
        """Record the failure of a stage."""
        self.stage = stage
        self.error = str(exc)
        log.warning('Image %s failed at %s: %s', self.image_id, stage, exc)
        return self

    def count(self, found):
        """Add a DetectionSet's clamped and dropped counters."""
        self.clamped += found.clamped
        self.dropped += found.dropped


def back_project(found, spec, dims):
    """Map a view's detections back to the original frame.

    Boxes that collapse outside the frame are dropped and counted.
    """
    out = DetectionSet(view_index=found.view_index,
                       raw_response=found.raw_response,
                       dropped=found.dropped, clamped=found.clamped)
    for detection in found.detections:
        try:
            box = invert_transform(detection.box, spec, dims)
        except DegenerateResult:
            out.dropped += 1
            continue
        out.detections.append(Detection(box, detection.label))
    return out


def view_plan(cfg, seed, image_id):
    """Transforms and temperature of the M views of one image."""
    if cfg.uncertainty == LINGUISTIC:
        return [TransformSpec.identity()] * cfg.m, LINGUISTIC_TEMPERATURE
    roster = make_roster(derive_seed(seed, image_id, 'roster'), cfg.m,
                         cfg.rotation)
    return list(roster.specs), 0.0


def infer_image(entry, grounder, prompt, cfg, seed, purpose=PURPOSE_INFER):
    """Ground one image on its reference and perturbed views.

    A failed reference call fails the image; a failed view contributes an
    empty DetectionSet.

    :return: ImageResult
    """
    result = ImageResult(entry.image_id)
    try:
        image = grounder.load(entry)
        dims = grounder.dims(entry, image)
    except DDLError as exc:
        return result.fail('load', exc)
    try:
        reference = grounder(entry, image, dims, TransformSpec.identity(),
                             prompt, 0, 0.0, purpose)
    except DDLError as exc:
        return result.fail('reference', exc)
    result.count(reference)

    specs, temperature = view_plan(cfg, seed, entry.image_id)

    def run_view(item):
        index, spec = item
        try:
            found = grounder(entry, image, dims, spec, prompt, index,
                             temperature, purpose)
        except DDLError as exc:
            log.warning('Image %s view %s failed: %s', entry.image_id,
                        index, exc)
            return None
        return back_project(found, spec, dims)

    items = list(enumerate(specs, 1))
    if grounder.concurrent:
        with ThreadPoolExecutor(max_workers=min(len(items),
                                                cfg.workers)) as pool:
            outcomes = list(pool.map(run_view, items))
    else:
        outcomes = [run_view(item) for item in items]

    views = []
    for index, outcome in enumerate(outcomes, 1):
        if outcome is None:
            result.view_failures += 1
            outcome = DetectionSet(view_index=index)
        result.count(outcome)
        views.append(outcome)
    result.detections = consolidate(cfg.strategy, reference, views,
                                    cfg.consensus(), cfg.eps, cfg.min_pts)
    return result


def run_inference(cfg, entries, grounder, prompt, seed,
                  purpose=PURPOSE_INFER):
    """Ground images concurrently; results keep the order of ``entries``."""
    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        return list(pool.map(
            lambda e: infer_image(e, grounder, prompt, cfg, seed, purpose),
            entries))


def _single_pass(entry, grounder, prompt):
    try:
        image = grounder.load(entry)
        dims = grounder.dims(entry, image)
        found = grounder(entry, image, dims, TransformSpec.identity(),
                         prompt, 0, 0.0, PURPOSE_SCORE)
    except DDLError as exc:
        log.debug('Scoring call failed on %s: %s', entry.image_id, exc)
        return []
    return [ConsolidatedDetection(box=d.box, label=d.label)
            for d in found.detections]


def make_scorer(cfg, entries, grounder, seed):
    """Build the development-set scorer of candidate prompts.

    The score is the mean of AP at the evaluation thresholds, from a single
    reference call per image or, with ``score_full_pipeline``, from the full
    consolidation pipeline.
    """
    def score(prompt):
        if cfg.score_full_pipeline:
            results = run_inference(cfg, entries, grounder, prompt, seed,
                                    PURPOSE_SCORE)
            predictions = [r.detections for r in results]
        else:
            with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
                predictions = list(pool.map(
                    lambda e: _single_pass(e, grounder, prompt), entries))
        samples = [EvalSample(e.image_id, e.ground_truth, p)
                   for e, p in zip(entries, predictions)]
        metrics = evaluate(samples)
        return math.fsum(metrics.values()) / len(metrics)
    return score


def make_grounder(cfg, seed):
    """Grounder of a run: the mock LVLM in mock mode, else the endpoint."""
    if cfg.mock:
        return MockGrounder(cfg.noise(), seed)
    return EndpointGrounder(ChatCompletionsClient(cfg.target_endpoint(),
                                                  token=cfg.api_token))


def make_meta(cfg):
    """Meta-optimizer client; scripted in mock mode without a meta URL."""
    if cfg.mock and not cfg.meta_url:
        return ScriptedMetaClient()
    return ChatCompletionsClient(cfg.meta_endpoint(), token=cfg.api_token)


def prediction_record(result, seed, config_hash):
    """Serialize one image's detections for ``predictions.jsonl``."""
    return {
        'image_id': result.image_id,
        'seed': seed,
        'config_hash': config_hash,
        'detections': [{
            'bbox': d.box.as_list(0),
            'label': d.label,
            'sigma': None if d.sigma is None else round(d.sigma, SIGMA_DIGITS),
        } for d in result.detections],
    }


def detections_from_record(row):
    """Rebuild ConsolidatedDetections from a prediction record."""
    return [ConsolidatedDetection(box=BoundingBox.from_sequence(d['bbox']),
                                  sigma=d.get('sigma'),
                                  label=d.get('label', ''))
            for d in row.get('detections', [])]


def _sigma_summary(pairs):
    sigmas = [s for s, _ in pairs]
    true = [s for s, overlap in pairs if overlap >= TRUE_POSITIVE_IOU]
    return {
        'n': len(sigmas),
        'mean': math.fsum(sigmas) / len(sigmas) if sigmas else None,
        'true_positive_mean': math.fsum(true) / len(true) if true else None,
    }


def summarize(samples_by_seed, thresholds=THRESHOLDS):
    """Metrics averaged over seeds plus calibration of the pooled pairs.

    :param samples_by_seed: list of ``(seed, [EvalSample])``
    :return: report dict
    """
    per_seed = []
    pairs = []
    for seed, samples in samples_by_seed:
        per_seed.append({'seed': seed,
                         'metrics': evaluate(samples, thresholds)})
        pairs.extend(calibration_pairs(samples))
    metrics = {}
    for threshold in thresholds:
        key = metric_name(threshold)
        values = [p['metrics'][key] for p in per_seed]
        metrics[key] = math.fsum(values) / len(values) if values else 0.0
    return {
        'metrics': metrics,
        'per_seed': per_seed,
        'calibration': calibration(pairs).to_dict() if pairs else None,
        'sigma': _sigma_summary(pairs),
    }


@dataclass
class RunArtifacts(object):
    """In-memory view of everything a run persisted."""

    output_dir: str
    prompt: dape.PromptRecord
    history: dape.PromptHistory = None
    predictions: list = field(default_factory=list)
    report: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)


def select_prompt(cfg, data, grounder, meta=None, prompt=None, seed=0):
    """Choose the instruction of a run.

    An explicit ``prompt`` wins; without a development split the vanilla
    instruction is used; otherwise the prompt is evolved on the dev split.

    :return: ``(PromptRecord, PromptHistory or None)``
    """
    if prompt is not None:
        return dape.PromptRecord(prompt, 0, dape.ORIGIN_VANILLA), None
    vanilla = dape.vanilla_prompt()
    if not data.dev:
        log.warning('No dev split: using the vanilla prompt')
        return dape.PromptRecord(vanilla, 0, dape.ORIGIN_VANILLA), None
    meta = meta if meta is not None else make_meta(cfg)
    scorer = make_scorer(cfg, data.dev, grounder, seed)
    return dape.optimize(vanilla, meta, scorer, cfg.max_generations)


def history_rows(best, history, seed, config_hash):
    records = history.records if history is not None else (best,)
    rows = []
    for record in records:
        row = record.to_dict()
        row.update(seed=seed, config_hash=config_hash)
        rows.append(row)
    return rows


def run_ddl(cfg, data, grounder=None, meta=None, prompt=None):
    """Run prompt evolution, grounding, consolidation and evaluation.

    :param cfg:      RunConfig
    :param data:     DatasetManifest
    :param grounder: grounder override; built from ``cfg`` when omitted
    :param meta:     meta-optimizer override
    :param prompt:   fixed instruction, skipping prompt evolution
    :return: RunArtifacts
    """
    writer = ArtifactWriter(cfg.output_dir)
    config_hash = cfg.config_hash()
    seeds = cfg.run_seeds()
    endpoint = None if cfg.mock else cfg.target_url
    with run_log_handler(writer, cfg.log_level, endpoint):
        log.info('Run started: strategy=%s, uncertainty=%s, M=%s, seeds=%s',
                 cfg.strategy, cfg.uncertainty, cfg.m, list(seeds))
        writer.write_json(CONFIG_FILE, {'config': cfg.snapshot(),
                                        'seed': seeds[0],
                                        'config_hash': config_hash})
        primary = gate(grounder if grounder is not None
                       else make_grounder(cfg, seeds[0]), cfg.workers)
        best, history = select_prompt(cfg, data, primary, meta, prompt,
                                      seeds[0])
        writer.append_jsonl(HISTORY_FILE, history_rows(best, history,
                                                        seeds[0],
                                                        config_hash))

        entries = data.test
        predictions, failures, samples_by_seed = [], [], []
        counts = dict(images=0, evaluated=0, failed=0, clamped=0,
                      dropped=0, view_failures=0)
        for seed in seeds:
            active = primary if grounder is not None or seed == seeds[0] \
                else gate(make_grounder(cfg, seed), cfg.workers)
            results = run_inference(cfg, entries, active, best.text, seed)
            samples = []
            for entry, result in zip(entries, results):
                counts['images'] += 1
                counts['clamped'] += result.clamped
                counts['dropped'] += result.dropped
                counts['view_failures'] += result.view_failures
                if result.failed:
                    counts['failed'] += 1
                    failures.append({'image_id': entry.image_id,
                                     'stage': result.stage,
                                     'error': result.error, 'seed': seed,
                                     'config_hash': config_hash})
                    continue
                counts['evaluated'] += 1
                predictions.append(prediction_record(result, seed,
                                                     config_hash))
                samples.append(EvalSample(entry.image_id, entry.ground_truth,
                                          result.detections))
            samples_by_seed.append((seed, samples))
        writer.append_jsonl(PREDICTIONS_FILE, predictions)
        writer.append_jsonl(FAILURES_FILE, failures)

        report = summarize(samples_by_seed)
        report.update(seed=seeds[0], config_hash=config_hash,
                      strategy=cfg.strategy, uncertainty=cfg.uncertainty,
                      counts=counts,
                      prompt={'text': best.text, 'score': best.score,
                              'generation': best.generation,
                              'origin': best.origin})
        writer.write_json(REPORT_FILE, report)
        log.info('Run finished: %s, failed=%s', report['metrics'],
                 counts['failed'])
    return RunArtifacts(cfg.output_dir, best, history, predictions, report,
                        failures)


@dataclass
class UncertaintyComparison(object):
    """Paired runs of the visual and linguistic uncertainty modes."""

    visual: RunArtifacts
    linguistic: RunArtifacts
    summary: dict = field(default_factory=dict)


def run_uncertainty_mode(cfg, data, grounder=None, meta=None):
    """Compare perceptual and decoding uncertainty on the same prompt.

    The visual run evolves the prompt; the linguistic run reuses it and
    replaces the perturbed views by temperature-1.0 samples of the reference
    view. Both runs use the configured consolidation strategy.

    :return: UncertaintyComparison, also written to ``comparison.json``
    """
    visual = run_ddl(replace(cfg, uncertainty=VISUAL,
                             output_dir=os.path.join(cfg.output_dir, VISUAL)),
                     data, grounder, meta)
    linguistic = run_ddl(
        replace(cfg, uncertainty=LINGUISTIC,
                output_dir=os.path.join(cfg.output_dir, LINGUISTIC)),
        data, grounder, meta, prompt=visual.prompt.text)
    summary = {
        'prompt': visual.prompt.text,
        'config_hash': cfg.config_hash(),
        'seed': cfg.run_seeds()[0],
        VISUAL: visual.report,
        LINGUISTIC: linguistic.report,
        'mean_sigma': {VISUAL: visual.report['sigma']['mean'],
                       LINGUISTIC: linguistic.report['sigma']['mean']},
        'true_positive_sigma': {
            VISUAL: visual.report['sigma']['true_positive_mean'],
            LINGUISTIC: linguistic.report['sigma']['true_positive_mean']},
    }
    ArtifactWriter(cfg.output_dir).write_json(COMPARISON_FILE, summary)
    return UncertaintyComparison(visual, linguistic, summary)


def read_jsonl(path):
    """Read a JSON lines file; a missing file reads as empty."""
    if not os.path.exists(path):
        return []
    with open(path, encoding='utf-8') as fh:
        return [json.loads(line) for line in fh if line.strip()]


def evaluate_predictions(data, rows, baseline_rows=None):
    """Evaluate prediction records against a manifest's test split.

    Test images without a record count as failed.

    :param data:          DatasetManifest
    :param rows:          prediction records
    :param baseline_rows: optional records of a baseline run; adds the
                          relative improvement table
    :return: report dict
    """
    report = _evaluate_rows(data, rows)
    if baseline_rows is not None:
        baseline = _evaluate_rows(data, baseline_rows)
        report['baseline_metrics'] = baseline['metrics']
        report['improvement'] = improvement_table(baseline['metrics'],
                                                  report['metrics'])
    return report


def _evaluate_rows(data, rows):
    entries = data.test
    by_seed = {}
    for row in rows:
        by_seed.setdefault(row.get('seed'), {})[row['image_id']] = row
    samples_by_seed = []
    failed = 0
    for seed, found in by_seed.items():
        samples = []
        for entry in entries:
            row = found.get(entry.image_id)
            if row is None:
                failed += 1
                continue
            samples.append(EvalSample(entry.image_id, entry.ground_truth,
                                      detections_from_record(row)))
        samples_by_seed.append((seed, samples))
    report = summarize(samples_by_seed)
    report['counts'] = {'images': len(entries) * max(1, len(by_seed)),
                        'evaluated': sum(len(s) for _, s in samples_by_seed),
                        'failed': failed if by_seed else len(entries)}
    return report


def analyze_run(run_dir, data):
    """Calibration and prompt-distribution analysis of a finished run.

    :param run_dir: directory holding the run artifacts
    :param data:    DatasetManifest the run was grounded on
    :return: analysis dict, also written to ``analysis.json``
    """
    report = evaluate_predictions(
        data, read_jsonl(os.path.join(run_dir, PREDICTIONS_FILE)))
    records = [dape.PromptRecord.from_dict(row) for row in
               read_jsonl(os.path.join(run_dir, HISTORY_FILE))]
    scored = [r for r in records if r.scored]
    analysis = {'metrics': report['metrics'],
                'calibration': report['calibration'],
                'sigma': report['sigma'],
                'trajectory': top_k_trajectory(scored),
                'kde': {}, 'kde_by_generation': {}}
    scores = [r.score for r in scored]
    for split in (SPLIT_NONE, SPLIT_MEDIAN):
        try:
            analysis['kde'][split] = [c.to_dict() for c in kde(scores, split)]
        except InsufficientData as exc:
            log.info('Skipping %s KDE: %s', split, exc)
    analysis['kde_by_generation'] = {
        str(g): curve.to_dict()
        for g, curve in kde_by_generation(scored).items()}
    ArtifactWriter(run_dir).write_json(ANALYSIS_FILE, analysis)
    return analysis

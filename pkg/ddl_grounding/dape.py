"""Distribution-aware prompt evolution.

The search keeps an append-only history of scored instructions. Every
generation contrasts the best prompts (success tail) with the worst ones
(failure bulk) and asks the meta-optimizer for one new candidate. Once even
the failure bulk beats the vanilla baseline, the meta-optimizer switches
from contrastive to exploitative refinement.
"""

import json
import logging
import pkgutil
from dataclasses import dataclass, field
from string import Template

import numpy as np

from .errors import (
    InsufficientHistory,
    ModelRefusal,
    ParseError,
    TransportError,
)
from .lvlm_client import MetaPromptKind, propose_prompt

log = logging.getLogger(__name__)

ORIGIN_VANILLA = 'vanilla'
ORIGIN_SEED = 'seed'
ORIGIN_EVOLVED = 'evolved'

DEFAULT_GENERATIONS = 10
CONVERGENCE_STD = 1e-4
CONVERGENCE_TOP = 3


def load_template(name):
    """Read a prompt template shipped with the package.

    :param name: template file name without extension
    :return: template text
    """
    data = pkgutil.get_data(__name__.rsplit('.', 1)[0],
                            'templates/{0}.txt'.format(name))
    return data.decode('utf-8')


def vanilla_prompt():
    """Return the default grounding instruction."""
    return load_template('vanilla').strip()


@dataclass
class PromptRecord(object):
    """One candidate instruction and its development-set score."""

    text: str
    generation: int = 0
    origin: str = ORIGIN_SEED
    score: float = None

    @property
    def scored(self):
        """Whether the score has been assigned."""
        return self.score is not None

    def assign_score(self, score):
        """Set the score; a record is scored exactly once.

        :param score: ratio in [0, 1]
        """
        if self.scored:
            raise ValueError('Record already scored: {0!r}'
                             .format(self.text[:40]))
        score = float(score)
        if not 0.0 <= score <= 1.0:
            raise ValueError('Score must be in [0, 1]: {0}'.format(score))
        self.score = score
        return self

    def to_dict(self):
        """Serialize for the history log."""
        return {'text': self.text, 'score': self.score,
                'generation': self.generation, 'origin': self.origin}

    @classmethod
    def from_dict(cls, payload):
        """Deserialize one history log object."""
        return cls(text=payload['text'],
                   generation=int(payload.get('generation', 0)),
                   origin=payload.get('origin', ORIGIN_SEED),
                   score=payload.get('score'))


class PromptHistory(object):
    """Append-only history of scored prompts anchored on the vanilla one."""

    def __init__(self, vanilla):
        """Start a history from the scored vanilla record.

        :param vanilla: PromptRecord with origin ``vanilla``
        """
        if not vanilla.scored:
            raise ValueError('The vanilla prompt must be scored first')
        self.vanilla = vanilla
        self._records = [vanilla]

    @property
    def records(self):
        """All records in insertion order."""
        return tuple(self._records)

    @property
    def candidates(self):
        """Records eligible for partitioning: every record but the vanilla."""
        return [r for r in self._records if r is not self.vanilla]

    @property
    def baseline(self):
        """Score of the vanilla prompt, the success threshold."""
        return self.vanilla.score

    def __len__(self):
        """Return the number of records."""
        return len(self._records)

    def append(self, record):
        """Add a scored record."""
        if not record.scored:
            raise ValueError('Only scored records can be appended')
        self._records.append(record)

    def scores(self):
        """Scores in insertion order."""
        return [r.score for r in self._records]

    def best(self):
        """Return the highest-scoring record, the earliest one on ties."""
        best = self._records[0]
        for record in self._records[1:]:
            if record.score > best.score:
                best = record
        return best

    def to_lines(self):
        """Serialize the history as JSON lines."""
        return [json.dumps(r.to_dict(), sort_keys=True)
                for r in self._records]

    def dump(self, path):
        """Write the history log to ``path``."""
        with open(path, 'w', encoding='utf-8') as fh:
            for line in self.to_lines():
                fh.write(line + '\n')

    @classmethod
    def load(cls, path):
        """Read a history log written by :meth:`dump`."""
        with open(path, encoding='utf-8') as fh:
            records = [PromptRecord.from_dict(json.loads(line))
                       for line in fh if line.strip()]
        vanillas = [r for r in records if r.origin == ORIGIN_VANILLA]
        if not vanillas:
            raise InsufficientHistory('History {0} has no vanilla record'
                                      .format(path))
        history = cls(vanillas[0])
        for record in records:
            if record is not vanillas[0]:
                history.append(record)
        return history


@dataclass
class Partition(object):
    """Success tail and failure bulk of the history."""

    success: list = field(default_factory=list)
    failure: list = field(default_factory=list)
    k: int = 0
    baseline: float = 0.0

    @property
    def exploitative(self):
        """True when even the failure bulk beats the baseline."""
        return bool(self.failure) and \
            min(r.score for r in self.failure) > self.baseline

    @property
    def mode(self):
        """MetaPromptKind to query the meta-optimizer with."""
        if self.exploitative:
            return MetaPromptKind.EXPLOITATIVE
        return MetaPromptKind.CONTRASTIVE


def seed_population(vanilla, meta):
    """Build the initial, unscored pool.

    :param vanilla: vanilla instruction text
    :param meta:    meta-optimizer client
    :return: the vanilla record followed by the seed variants
    """
    context = Template(load_template('init')).substitute(
        vanilla='<VANILLA>\n{0}\n</VANILLA>'.format(vanilla))
    variants = propose_prompt(meta, MetaPromptKind.INIT, context)
    records = [PromptRecord(vanilla, 0, ORIGIN_VANILLA)]
    records.extend(PromptRecord(text, 0, ORIGIN_SEED) for text in variants)
    log.info('Seeded prompt pool with %s variants', len(variants))
    return records


def window_size(g, history_len):
    """Size of the success and failure windows at generation ``g``.

    :param g:           generation, starting at 1
    :param history_len: number of partitioned records
    :return: k
    """
    return min(max(CONVERGENCE_TOP, g // 2 + 1), max(1, history_len // 2))


def partition(history, k):
    """Split the candidates into a success tail and a failure bulk.

    Both windows come from one stable ranking by descending score, so ties
    keep insertion order. ``k`` is capped at half the candidates, which keeps
    the windows disjoint. The failure bulk is listed by ascending score.

    :param history: PromptHistory with every record scored
    :param k:       window size
    :return: Partition
    """
    ranked = history.candidates
    if len(ranked) < 2:
        raise InsufficientHistory('Need at least 2 candidates, got {0}'
                                  .format(len(ranked)))
    if any(not r.scored for r in ranked):
        raise ValueError('Every record must be scored before partitioning')
    ranked = sorted(ranked, key=lambda r: -r.score)
    k = max(1, min(k, len(ranked) // 2))
    return Partition(success=ranked[:k], failure=ranked[::-1][:k], k=k,
                     baseline=history.baseline)


def _blocks(records):
    return '\n'.join('<PROMPT score="{0:.4f}">{1}</PROMPT>'
                     .format(r.score, r.text) for r in records)


def assemble_context(part, vanilla, mode):
    """Fill the meta-prompt for a refinement step.

    :param part:    Partition
    :param vanilla: vanilla PromptRecord
    :param mode:    CONTRASTIVE or EXPLOITATIVE
    :return: context text
    """
    if mode == MetaPromptKind.CONTRASTIVE:
        return Template(load_template('contrastive')).substitute(
            success=_blocks(part.success), failure=_blocks(part.failure))
    if mode == MetaPromptKind.EXPLOITATIVE:
        return Template(load_template('exploitative')).substitute(
            base='<BASE score="{0:.4f}">{1}</BASE>'.format(vanilla.score,
                                                              vanilla.text),
            success=_blocks(part.success), failure=_blocks(part.failure))
    raise ValueError('Refinement context needs a refinement mode, got {0}'
                     .format(mode))


def has_converged(history):
    """Whether the three best scores have collapsed together."""
    scores = history.scores()
    if len(scores) < CONVERGENCE_TOP:
        raise InsufficientHistory('Need at least {0} records, got {1}'
                                  .format(CONVERGENCE_TOP, len(scores)))
    top = sorted(scores, reverse=True)[:CONVERGENCE_TOP]
    return float(np.std(top)) < CONVERGENCE_STD


def _propose(meta, mode, context, generation):
    for attempt in (1, 2):
        try:
            return propose_prompt(meta, mode, context)
        except (ParseError, TransportError, ModelRefusal) as exc:
            log.warning('Generation %s: proposal attempt %s failed: %s',
                        generation, attempt, exc)
    return None


def evolve(history, meta, scorer, max_generations=DEFAULT_GENERATIONS,
           on_record=None):
    """Run the evolution loop.

    :param history:         PromptHistory holding the scored seed pool
    :param meta:            meta-optimizer client
    :param scorer:          callable mapping a prompt to its dev-set score
    :param max_generations: generation cap
    :param on_record:       optional callback receiving every new record
    :return: best PromptRecord
    """
    for g in range(1, max_generations + 1):
        if len(history) >= CONVERGENCE_TOP and has_converged(history):
            log.info('Converged before generation %s', g)
            break
        part = partition(history, window_size(g, len(history.candidates)))
        mode = part.mode
        context = assemble_context(part, history.vanilla, mode)
        text = _propose(meta, mode, context, g)
        if text is None:
            log.warning('Generation %s skipped', g)
            continue
        record = PromptRecord(text, g, ORIGIN_EVOLVED)
        record.assign_score(scorer(text))
        history.append(record)
        log.info('Generation %s: mode=%s, k=%s, score=%.4f', g,
                 mode.value, part.k, record.score)
        if on_record is not None:
            on_record(record)
    best = history.best()
    log.info('Best prompt: generation=%s, origin=%s, score=%.4f',
             best.generation, best.origin, best.score)
    return best


def optimize(vanilla, meta, scorer, max_generations=DEFAULT_GENERATIONS):
    """Seed, score and evolve a prompt population.

    :param vanilla:         vanilla instruction text
    :param meta:            meta-optimizer client
    :param scorer:          callable mapping a prompt to its dev-set score
    :param max_generations: generation cap
    :return: ``(best PromptRecord, PromptHistory)``
    """
    records = seed_population(vanilla, meta)
    for record in records:
        record.assign_score(scorer(record.text))
    history = PromptHistory(records[0])
    for record in records[1:]:
        history.append(record)
    best = evolve(history, meta, scorer, max_generations)
    return best, history

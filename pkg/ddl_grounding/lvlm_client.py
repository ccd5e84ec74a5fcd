"""Chat-completions clients for the grounding model and the meta-optimizer.

Both services speak the OpenAI-compatible ``/v1/chat/completions`` protocol.
This module also parses model replies into detections and candidate prompts
and provides the deterministic mock LVLM used for offline runs.
"""

import enum
import json
import logging
import re
import time
from dataclasses import dataclass, field
from os import getenv

import numpy as np
import requests

from .errors import (
    DegenerateResult,
    ModelRefusal,
    ParseError,
    TagMissing,
    TransportError,
    VariantCountMismatch,
)
from .geometry import BoundingBox, apply_transform, clamp_coords

log = logging.getLogger(__name__)

TOKEN_ENV = 'DDL_API_TOKEN'
SEED_VARIANTS = 5
NO_TARGET = 'no target'

_RETRY_STATUSES = (429, 500, 502, 503, 504)
_IMPROVED_RE = re.compile(r'<IMPROVED_PROMPT>(.*?)</IMPROVED_PROMPT>',
                          re.DOTALL)
_VARIANT_RE = re.compile(r'^variant_(\d+)$')


class MetaPromptKind(enum.Enum):
    """Reasoning mode of the meta-optimizer."""

    INIT = 'init'
    CONTRASTIVE = 'contrastive'
    EXPLOITATIVE = 'exploitative'


@dataclass(frozen=True)
class ModelEndpoint(object):
    """Connection and decoding settings of one chat-completions service."""

    base_url: str
    model: str
    timeout: float = 60.0
    max_retries: int = 3
    temperature: float = 0.0
    max_tokens: int = 1024
    top_p: float = None
    backoff: float = 1.0
    normalized_range: int = 0

    def __post_init__(self):
        """Validate timeouts and limits."""
        if not self.timeout > 0:
            raise ValueError('Endpoint timeout must be positive')
        if self.max_retries < 0:
            raise ValueError('max_retries must be >= 0')
        if self.max_tokens < 1:
            raise ValueError('max_tokens must be >= 1')

    @property
    def completions_url(self):
        """Full URL of the chat completions route."""
        return '{0}/v1/chat/completions'.format(self.base_url.rstrip('/'))


@dataclass(frozen=True)
class Detection(object):
    """One labeled box."""

    box: BoundingBox
    label: str = ''


@dataclass
class DetectionSet(object):
    """Boxes produced by one model call on one view.

    ``dropped`` counts degenerate boxes discarded while parsing and
    ``clamped`` counts boxes whose coordinates were pulled into the frame.
    """

    detections: list = field(default_factory=list)
    view_index: int = 0
    raw_response: str = ''
    dropped: int = 0
    clamped: int = 0

    @property
    def boxes(self):
        """Boxes in detection order."""
        return [d.box for d in self.detections]

    def __len__(self):
        """Return the number of detections."""
        return len(self.detections)


@dataclass(frozen=True)
class MockNoise(object):
    """Noise model of the mock LVLM.

    ``sampling_jitter_px`` is extra per-call jitter of calls decoded with a
    non-zero temperature. With ``consistent_jitter`` the base jitter of a
    truth box is drawn once per image and shared by all its views.
    """

    jitter_px: float = 0.0
    hallucination_prob: float = 0.0
    miss_prob: float = 0.0
    sampling_jitter_px: float = 0.0
    consistent_jitter: bool = False

    def __post_init__(self):
        """Validate ranges."""
        if self.jitter_px < 0 or self.sampling_jitter_px < 0:
            raise ValueError('Jitter must be non-negative')
        for name in ('hallucination_prob', 'miss_prob'):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError('{0} must be in [0, 1]: {1}'
                                 .format(name, value))


class ChatCompletionsClient(object):
    """Thin ``requests`` client for an OpenAI-compatible endpoint."""

    def __init__(self, endpoint, token=None, session=None):
        """Initialize the client.

        :param endpoint: ModelEndpoint
        :param token:    bearer token; defaults to the DDL_API_TOKEN env var
        :param session:  optional requests.Session to reuse
        """
        self.endpoint = endpoint
        self.token = token or getenv(TOKEN_ENV)
        self.session = session or requests.Session()

    def _headers(self):
        headers = {'Content-Type': 'application/json'}
        if self.token:
            headers['Authorization'] = 'Bearer {0}'.format(self.token)
        return headers

    def check_connection(self):
        """Probe ``GET /v1/models`` on the endpoint.

        :raises TransportError: if the endpoint does not answer with 2xx
        """
        url = '{0}/v1/models'.format(self.endpoint.base_url.rstrip('/'))
        try:
            resp = self.session.get(url, headers=self._headers(),
                                    timeout=self.endpoint.timeout)
            resp.raise_for_status()
        except requests.exceptions.RequestException as exc:
            log.exception(exc)
            raise TransportError('Endpoint {0} is unreachable: {1}'
                                 .format(self.endpoint.base_url, exc))

    def complete(self, messages, temperature=None, top_p=None):
        """Send one chat completion request and return the reply text.

        Transport failures, timeouts and 429/5xx answers are retried with
        exponential backoff up to ``endpoint.max_retries`` times.

        :param messages:    chat messages
        :param temperature: overrides the endpoint temperature
        :param top_p:       overrides the endpoint top_p
        :return: completion text
        """
        payload = {
            'model': self.endpoint.model,
            'messages': messages,
            'temperature': self.endpoint.temperature
            if temperature is None else temperature,
            'max_tokens': self.endpoint.max_tokens,
        }
        top_p = self.endpoint.top_p if top_p is None else top_p
        if top_p is not None:
            payload['top_p'] = top_p
        log.debug('Chat completion: url=%s, model=%s, temperature=%s',
                  self.endpoint.completions_url, payload['model'],
                  payload['temperature'])

        attempt = 0
        while True:
            try:
                resp = self.session.post(self.endpoint.completions_url,
                                         json=payload,
                                         headers=self._headers(),
                                         timeout=self.endpoint.timeout)
                if resp.status_code in _RETRY_STATUSES:
                    raise requests.exceptions.HTTPError(
                        'HTTP {0}'.format(resp.status_code), response=resp)
                resp.raise_for_status()
                body = resp.json()
                break
            except (requests.exceptions.ConnectionError,
                    requests.exceptions.Timeout,
                    requests.exceptions.HTTPError) as exc:
                status = getattr(getattr(exc, 'response', None),
                                 'status_code', None)
                retriable = status is None or status in _RETRY_STATUSES
                if not retriable or attempt >= self.endpoint.max_retries:
                    raise TransportError(
                        'Chat completion failed after {0} attempt(s): {1}'
                        .format(attempt + 1, exc))
                delay = self.endpoint.backoff * (2 ** attempt)
                log.warning('Chat completion failed (%s), retrying in %.1fs',
                            exc, delay)
                time.sleep(delay)
                attempt += 1
            except ValueError as exc:
                raise TransportError('Malformed JSON body: {0}'.format(exc))
            except requests.exceptions.RequestException as exc:
                raise TransportError('Chat completion failed: {0}'.format(exc))

        try:
            content = body['choices'][0]['message']['content']
        except (KeyError, IndexError, TypeError):
            raise TransportError('Unexpected completion body: {0}'
                                 .format(body))
        if not content or not content.strip():
            raise ModelRefusal('Model returned an empty completion')
        return content


def _is_number(value):
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _is_detection_array(value):
    if not isinstance(value, list):
        return False
    for item in value:
        if not isinstance(item, dict):
            return False
        bbox = item.get('bbox_2d')
        if not (isinstance(bbox, list) and len(bbox) == 4
                and all(_is_number(c) for c in bbox)):
            return False
    return True


def _find_detection_array(raw):
    decoder = json.JSONDecoder()
    pos = raw.find('[')
    while pos != -1:
        try:
            value, _ = decoder.raw_decode(raw, pos)
        except (ValueError, RecursionError):
            value = None
        if _is_detection_array(value):
            return value
        pos = raw.find('[', pos + 1)
    return None


def parse_detections(raw, dims, view_index=0, normalized_range=0):
    """Extract detections from a model reply.

    Order of extraction: an exact ``no target`` reply yields an empty set;
    otherwise the first well-formed array of ``bbox_2d`` objects anywhere in
    the text (code fences included) is used. Coordinates are clamped to the
    frame and degenerate boxes are dropped and counted.

    :param raw:              completion text
    :param dims:             ImageDims of the view the model saw
    :param view_index:       0 for the reference view
    :param normalized_range: 0 for pixel coordinates, otherwise the upper
                             bound of normalized model coordinates
    :return: DetectionSet
    :raises ParseError: when no detection array can be found
    """
    raw = raw if isinstance(raw, str) else str(raw)
    if raw.strip().lower() == NO_TARGET:
        return DetectionSet(view_index=view_index, raw_response=raw)

    items = _find_detection_array(raw)
    if items is None:
        raise ParseError('No bbox_2d array found in model output', raw=raw)

    result = DetectionSet(view_index=view_index, raw_response=raw)
    for item in items:
        x1, y1, x2, y2 = (float(c) for c in item['bbox_2d'])
        if normalized_range:
            sx = dims.width / float(normalized_range)
            sy = dims.height / float(normalized_range)
            x1, x2 = x1 * sx, x2 * sx
            y1, y2 = y1 * sy, y2 * sy
        if not (x1 < x2 and y1 < y2):
            result.dropped += 1
            continue
        if x1 < 0 or y1 < 0 or x2 > dims.width or y2 > dims.height:
            result.clamped += 1
        try:
            box = clamp_coords(x1, y1, x2, y2, dims)
        except DegenerateResult:
            result.dropped += 1
            continue
        label = item.get('label', '')
        result.detections.append(
            Detection(box, label if isinstance(label, str) else str(label)))
    if result.dropped:
        log.debug('Dropped %s degenerate box(es) from view %s',
                  result.dropped, view_index)
    return result


def ground(client, image, prompt, view_index=0, temperature=None):
    """Ask the grounding model for boxes on one image.

    :param client:      ChatCompletionsClient of the target model
    :param image:       RasterImage as the model will see it
    :param prompt:      instruction text
    :param view_index:  0 for the reference view
    :param temperature: decoding temperature override
    :return: DetectionSet
    """
    messages = [{
        'role': 'user',
        'content': [
            {'type': 'image_url', 'image_url': {'url': image.to_data_url()}},
            {'type': 'text', 'text': prompt},
        ],
    }]
    raw = client.complete(messages, temperature=temperature)
    return parse_detections(
        raw, image.dims, view_index=view_index,
        normalized_range=client.endpoint.normalized_range)


def _parse_variants(raw):
    decoder = json.JSONDecoder()
    pos = raw.find('{')
    while pos != -1:
        try:
            value, _ = decoder.raw_decode(raw, pos)
        except (ValueError, RecursionError):
            value = None
        if isinstance(value, dict):
            keyed = []
            for key, text in value.items():
                match = _VARIANT_RE.match(str(key))
                if match and isinstance(text, str) and text.strip():
                    keyed.append((int(match.group(1)), text.strip()))
            if keyed:
                return [text for _, text in sorted(keyed)]
        pos = raw.find('{', pos + 1)
    return []


def parse_improved_prompt(raw):
    """Return the text inside ``<IMPROVED_PROMPT>`` tags.

    :raises TagMissing: when the tags are absent or empty
    """
    match = _IMPROVED_RE.search(raw)
    if match is None or not match.group(1).strip():
        raise TagMissing('No <IMPROVED_PROMPT> block in completion', raw=raw)
    return match.group(1).strip()


def propose_prompt(client, kind, context):
    """Query the meta-optimizer.

    :param client:  ChatCompletionsClient (or scripted stand-in) of the
                    meta-optimizer
    :param kind:    MetaPromptKind
    :param context: filled meta-prompt template
    :return: list of 5 variants for INIT, otherwise one prompt string
    """
    raw = client.complete([{'role': 'user', 'content': context}])
    if kind == MetaPromptKind.INIT:
        variants = _parse_variants(raw)
        if len(variants) != SEED_VARIANTS:
            raise VariantCountMismatch(
                'Expected {0} variants, got {1}'.format(SEED_VARIANTS,
                                                        len(variants)),
                raw=raw)
        return variants
    return parse_improved_prompt(raw)


def _offsets(rng, amplitude):
    if not amplitude:
        return np.zeros(4)
    return rng.uniform(-amplitude, amplitude, 4)


def _shifted(box, offsets, dims):
    return clamp_coords(box.x1 + offsets[0], box.y1 + offsets[1],
                        box.x2 + offsets[2], box.y2 + offsets[3], dims)


def mock_ground(truth, spec, noise, seed, dims, view_index=0, temperature=0.0,
                label='lesion', jitter_seed=None):
    """Simulate a grounding call on one view.

    Truth boxes are mapped into the view, jittered uniformly per coordinate
    and dropped with ``miss_prob``; with ``hallucination_prob`` a fresh
    random box is appended, placed independently for every call.

    :param truth:       list of BoundingBox in original coordinates
    :param spec:        TransformSpec of the view
    :param noise:       MockNoise
    :param seed:        integer seed of this call
    :param dims:        ImageDims of the original image
    :param view_index:  0 for the reference view
    :param temperature: decoding temperature of the simulated call
    :param label:       label of every emitted box
    :param jitter_seed: per-image seed of the shared base jitter, used when
                        ``noise.consistent_jitter`` is set
    :return: DetectionSet in view coordinates
    """
    rng = np.random.default_rng(seed)
    shared = noise.consistent_jitter and jitter_seed is not None
    base_rng = np.random.default_rng(jitter_seed) if shared else rng
    view_dims = spec.output_dims(dims)
    sampling = noise.sampling_jitter_px if temperature > 0 else 0.0

    result = DetectionSet(view_index=view_index, raw_response='<mock>')
    for box in truth:
        missed = rng.random() < noise.miss_prob
        base = _offsets(base_rng, noise.jitter_px)
        extra = _offsets(rng, sampling)
        if missed:
            continue
        try:
            if shared:
                mapped = apply_transform(_shifted(box, base, dims), spec, dims)
                noisy = _shifted(mapped, extra, view_dims)
            else:
                mapped = apply_transform(box, spec, dims)
                noisy = _shifted(mapped, base + extra, view_dims)
        except DegenerateResult:
            result.dropped += 1
            continue
        result.detections.append(Detection(noisy, label))

    if rng.random() < noise.hallucination_prob:
        w = rng.uniform(0.1, 0.3) * view_dims.width
        h = rng.uniform(0.1, 0.3) * view_dims.height
        x1 = rng.uniform(0.0, view_dims.width - w)
        y1 = rng.uniform(0.0, view_dims.height - h)
        result.detections.append(
            Detection(BoundingBox(x1, y1, x1 + w, y1 + h), label))
    return result


class ScriptedMetaClient(object):
    """Offline meta-optimizer that answers from the context it receives.

    Initialization returns five deterministic rewrites of the vanilla
    instruction; refinement returns the first prompt of the success tail.
    Every request is kept in ``requests`` for inspection.
    """

    _STYLES = (
        'Analyze the image step by step before answering.',
        'Act as an expert neuroradiologist.',
        'Be strict about the output format.',
        'Describe the suspicious region to yourself first.',
        'Only report regions you are confident about.',
    )

    def __init__(self, endpoint=None):
        """Initialize the scripted client.

        :param endpoint: optional ModelEndpoint, kept for symmetry
        """
        self.endpoint = endpoint
        self.requests = []

    def complete(self, messages, temperature=None, top_p=None):
        """Return a scripted completion for the last user message."""
        context = messages[-1]['content']
        self.requests.append(context)
        vanilla = _between(context, '<VANILLA>', '</VANILLA>')
        if vanilla is not None:
            return json.dumps({
                'variant_{0}'.format(i + 1): '{0}\n{1}'.format(style, vanilla)
                for i, style in enumerate(self._STYLES)})
        best = _first_prompt_block(context) or context
        return '<ANALYSIS>scripted</ANALYSIS>\n' \
               '<IMPROVED_PROMPT>{0}</IMPROVED_PROMPT>'.format(best)


def _between(text, start, end):
    head = text.find(start)
    if head == -1:
        return None
    tail = text.find(end, head + len(start))
    if tail == -1:
        return None
    return text[head + len(start):tail].strip()


def _first_prompt_block(text):
    head = text.find('<PROMPT ')
    if head == -1:
        return None
    return _between(text[head:], '>', '</PROMPT>')

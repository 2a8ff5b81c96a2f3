"""The layered refinement engine and its plain multi-proposer baseline.

Refinement mode runs, per layer: parallel proposals, embedding-based
diversity selection, residual extraction against the previous layer's
selection, then builds the forward reference from the previous selection
plus the fresh residual. The baseline mode forwards every proposal with no
selection, residuals, or early stopping. Both end with one aggregation
call that produces the final response.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .accounting import UsageLedger
from .agents import (
    EMPTY_RESIDUAL_MARKER,
    NO_RESIDUAL,
    Residual,
    Response,
    SamplingParams,
    aggregate,
    extract_residual,
    propose,
    render_numbered_responses,
)
from .backends import Backends
from .embedding import (
    EmbeddingVector,
    build_similarity_matrix,
    embed_batch,
)
from .errors import (
    BackendUnavailableError,
    ConfigError,
    DegenerateEmbeddingError,
    DimensionMismatchError,
    EmptyResponseError,
    ProtocolError,
)
from .prompts import PromptSet, load_prompt_set
from .selection import SelectionResult, greedy_diverse_select
from .termination import (
    ResidualWindow,
    TerminationConfig,
    adaptive_should_stop,
    layer_converged,
)

MODES = ("rmoa", "moa")

STOP_MAX_LAYERS = "max_layers"
STOP_ADAPTIVE = "adaptive_stop"
STOP_BACKEND_ABORT = "backend_abort"

# Exceptions that mean "this call failed", as opposed to caller bugs.
_CALL_FAILURES = (BackendUnavailableError, ProtocolError, EmptyResponseError)

_DEFAULT_MAX_PARALLEL_PROPOSERS = 8


@dataclass(frozen=True)
class RunConfig:
    """Shape of one pipeline run.

    Defaults are the recommended operating point: six layers of six
    proposers with three responses kept per layer, sampled at temperature
    0.7 with a 1024-token cap.
    """

    layers: int = 6
    proposers_per_layer: int = 6
    select_k: int = 3
    termination: TerminationConfig = field(default_factory=TerminationConfig)
    sampling: SamplingParams = field(default_factory=SamplingParams)
    mode: str = "rmoa"
    benchmark: str = "generic"
    capture_layer_answers: bool = False

    def __post_init__(self) -> None:
        if self.layers < 1:
            raise ConfigError("layers must be at least 1")
        if self.proposers_per_layer < 1:
            raise ConfigError("proposers_per_layer must be at least 1")
        if not 1 <= self.select_k <= self.proposers_per_layer:
            raise ConfigError("select_k must satisfy 1 <= k <= proposers_per_layer")
        if not 1 <= self.termination.m <= self.layers:
            raise ConfigError("termination.m must satisfy 1 <= m <= layers")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")

    def to_json_dict(self) -> dict:
        return {
            "layers": self.layers,
            "proposers_per_layer": self.proposers_per_layer,
            "select_k": self.select_k,
            "termination": {
                "policy": self.termination.policy,
                "m": self.termination.m,
                "theta": self.termination.theta,
                "sigma2": self.termination.sigma2,
            },
            "sampling": {
                "temperature": self.sampling.temperature,
                "max_tokens": self.sampling.max_tokens,
            },
            "mode": self.mode,
            "benchmark": self.benchmark,
            "capture_layer_answers": self.capture_layer_answers,
        }


@dataclass
class LayerState:
    """Everything one layer produced."""

    layer: int
    responses: list[Response]
    selected: SelectionResult
    residual: Residual
    reference_context: str
    terminated_here: bool
    snapshot_answer: str | None = None

    def to_json_dict(self) -> dict:
        return {
            "layer": self.layer,
            "responses": [_response_dict(r) for r in self.responses],
            "selected": {
                "selected_indices": list(self.selected.selected_indices),
                "k": self.selected.k,
            },
            "residual": {"kind": self.residual.kind, "text": self.residual.text},
            "reference_context": self.reference_context,
            "terminated_here": self.terminated_here,
            "snapshot_answer": self.snapshot_answer,
        }


@dataclass
class Transcript:
    """Full record of one run; flushed to disk after every layer."""

    config: RunConfig
    query: str
    layer_states: list[LayerState]
    final_response: Response | None
    ledger: UsageLedger
    stop_reason: str | None
    events: list[str] = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {
            "config": self.config.to_json_dict(),
            "query": self.query,
            "layer_states": [state.to_json_dict() for state in self.layer_states],
            "final_response": (
                _response_dict(self.final_response) if self.final_response else None
            ),
            "ledger": self.ledger.to_json_dict(),
            "stop_reason": self.stop_reason,
            "events": list(self.events),
        }

    def to_json_bytes(self) -> bytes:
        return (json.dumps(self.to_json_dict(), indent=2, sort_keys=True) + "\n").encode(
            "utf-8"
        )


def _response_dict(response: Response) -> dict:
    return {
        "text": response.text,
        "layer": response.layer,
        "agent_index": response.agent_index,
        "role_name": response.role_name,
        "usage": {
            "prompt_tokens": response.usage.prompt_tokens,
            "completion_tokens": response.usage.completion_tokens,
        },
    }


def build_reference_context(
    previous_selected: list[Response] | tuple[Response, ...],
    residual: Residual,
) -> str:
    """Numbered reference blocks in selection order, then the residual block."""
    if not previous_selected:
        raise ValueError("previous_selected must be nonempty")
    residual_text = (
        residual.text if residual.detected and residual.text else EMPTY_RESIDUAL_MARKER
    )
    return (
        f"{render_numbered_responses(list(previous_selected))}\n\n"
        f"Residual:\n{residual_text}"
    )


def _flush(persist_dir: Path | None, transcript: Transcript) -> None:
    if persist_dir is None:
        return
    persist_dir = Path(persist_dir)
    persist_dir.mkdir(parents=True, exist_ok=True)
    (persist_dir / "transcript.json").write_bytes(transcript.to_json_bytes())
    ledger_payload = json.dumps(
        transcript.ledger.to_json_dict(), indent=2, sort_keys=True
    )
    (persist_dir / "ledger.json").write_text(ledger_payload + "\n", encoding="utf-8")


def _propose_layer(
    task: str,
    references: str | None,
    layer: int,
    config: RunConfig,
    backends: Backends,
    prompts: PromptSet,
    ledger: UsageLedger,
    events: list[str],
    parallelism: int | None,
) -> list[Response]:
    """Fan proposers out, then reassemble by agent index.

    Failed slots are dropped and noted; usage is appended to the ledger in
    agent-index order after the barrier so ledgers never depend on thread
    scheduling.
    """
    count = config.proposers_per_layer
    roles = prompts.roles

    def call(agent_index: int) -> Response:
        return propose(
            task,
            references,
            roles[agent_index % len(roles)],
            backends.chat,
            config.sampling,
            layer=layer,
            agent_index=agent_index,
            refinement_template=prompts.refinement,
        )

    outcomes: list[Response | Exception] = [None] * count  # type: ignore[list-item]
    workers = parallelism if parallelism else min(count, _DEFAULT_MAX_PARALLEL_PROPOSERS)
    if workers <= 1 or count == 1:
        for i in range(count):
            try:
                outcomes[i] = call(i)
            except _CALL_FAILURES as exc:
                outcomes[i] = exc
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(call, i) for i in range(count)]
            for i, future in enumerate(futures):
                try:
                    outcomes[i] = future.result()
                except _CALL_FAILURES as exc:
                    outcomes[i] = exc
    responses: list[Response] = []
    for i, outcome in enumerate(outcomes):
        if isinstance(outcome, Exception):
            events.append(f"layer {layer} proposer {i} failed: {outcome}")
        else:
            responses.append(outcome)
    for response in responses:
        ledger.append("proposer", backends.chat.model, response.usage)
    return responses


def run_rmoa(
    query: str,
    config: RunConfig,
    backends: Backends,
    *,
    prompts: PromptSet | None = None,
    ledger: UsageLedger | None = None,
    parallelism: int | None = None,
    persist_dir: Path | None = None,
) -> Transcript:
    """Run the residual refinement pipeline for one query."""
    if config.mode != "rmoa":
        raise ConfigError(f"run_rmoa requires mode 'rmoa', got {config.mode!r}")
    if backends.embedding is None:
        raise ConfigError("rmoa mode needs an embedding backend")
    if not query:
        raise ValueError("query must be nonempty")
    prompts = prompts or load_prompt_set(config.benchmark)
    ledger = ledger if ledger is not None else UsageLedger()
    transcript = Transcript(config, query, [], None, ledger, None)
    task = prompts.render_task(query)

    window = ResidualWindow((), config.termination.m)
    previous_selected: list[Response] = []
    previous_vectors: list[EmbeddingVector] = []
    reference: str | None = None
    aggregation_base: list[Response] = []
    final_residual: Residual = NO_RESIDUAL
    last_snapshot: Response | None = None

    for layer in range(1, config.layers + 1):
        responses = _propose_layer(
            task, reference, layer, config, backends, prompts,
            ledger, transcript.events, parallelism,
        )
        if not responses:
            return _abort(transcript, persist_dir, f"layer {layer}: every proposer failed")
        try:
            vectors = embed_batch(
                [r.text for r in responses],
                backends.embedding,
                ledger=ledger,
                on_event=transcript.events.append,
            )
            matrix = build_similarity_matrix(vectors)
            selection = greedy_diverse_select(matrix, config.select_k)
            selected = [responses[i] for i in selection.selected_indices]
            selected_vectors = [vectors[i] for i in selection.selected_indices]
            residual = extract_residual(
                selected,
                previous_selected,
                backends.chat,
                template=prompts.extraction,
                params=config.sampling,
                ledger=ledger,
            )
        except (_CALL_FAILURES + (DegenerateEmbeddingError, DimensionMismatchError)) as exc:
            return _abort(transcript, persist_dir, f"layer {layer}: {exc}")

        aggregation_base = previous_selected if previous_selected else selected
        final_residual = residual
        reference = build_reference_context(aggregation_base, residual)

        terminated_here = False
        if layer >= 2:
            converged = layer_converged(
                config.termination, residual.detected, previous_vectors, selected_vectors
            )
            window = window.extended(not converged)
            if (
                layer < config.layers
                and config.termination.policy != "none"
                and adaptive_should_stop(window)
            ):
                terminated_here = True

        state = LayerState(layer, responses, selection, residual, reference, terminated_here)
        if config.capture_layer_answers:
            try:
                last_snapshot = aggregate(
                    aggregation_base,
                    residual,
                    backends.chat,
                    query=query,
                    template=prompts.aggregation,
                    params=config.sampling,
                    layer=layer,
                    ledger=ledger,
                )
            except _CALL_FAILURES as exc:
                transcript.layer_states.append(state)
                return _abort(transcript, persist_dir, f"layer {layer} snapshot: {exc}")
            state.snapshot_answer = last_snapshot.text
        transcript.layer_states.append(state)
        _flush(persist_dir, transcript)
        if terminated_here:
            transcript.stop_reason = STOP_ADAPTIVE
            break
        previous_selected = selected
        previous_vectors = selected_vectors

    if transcript.stop_reason is None:
        transcript.stop_reason = STOP_MAX_LAYERS

    if config.capture_layer_answers and last_snapshot is not None:
        transcript.final_response = last_snapshot
    else:
        try:
            transcript.final_response = aggregate(
                aggregation_base,
                final_residual,
                backends.chat,
                query=query,
                template=prompts.aggregation,
                params=config.sampling,
                layer=transcript.layer_states[-1].layer,
                ledger=ledger,
            )
        except _CALL_FAILURES as exc:
            transcript.stop_reason = None
            return _abort(transcript, persist_dir, f"final aggregation: {exc}")
    _flush(persist_dir, transcript)
    return transcript


def run_moa(
    query: str,
    config: RunConfig,
    backends: Backends,
    *,
    prompts: PromptSet | None = None,
    ledger: UsageLedger | None = None,
    parallelism: int | None = None,
    persist_dir: Path | None = None,
) -> Transcript:
    """Run the plain baseline: every response forwarded, no early stop."""
    if config.mode != "moa":
        raise ConfigError(f"run_moa requires mode 'moa', got {config.mode!r}")
    if not query:
        raise ValueError("query must be nonempty")
    prompts = prompts or load_prompt_set(config.benchmark)
    ledger = ledger if ledger is not None else UsageLedger()
    transcript = Transcript(config, query, [], None, ledger, None)
    task = prompts.render_task(query)

    reference: str | None = None
    last_responses: list[Response] = []
    last_snapshot: Response | None = None

    for layer in range(1, config.layers + 1):
        responses = _propose_layer(
            task, reference, layer, config, backends, prompts,
            ledger, transcript.events, parallelism,
        )
        if not responses:
            return _abort(transcript, persist_dir, f"layer {layer}: every proposer failed")
        last_responses = responses
        reference = render_numbered_responses(responses)
        selection = SelectionResult(tuple(range(len(responses))), len(responses))
        state = LayerState(layer, responses, selection, NO_RESIDUAL, reference, False)
        if config.capture_layer_answers:
            try:
                last_snapshot = aggregate(
                    responses,
                    NO_RESIDUAL,
                    backends.chat,
                    query=query,
                    template=prompts.baseline_aggregation,
                    params=config.sampling,
                    layer=layer,
                    ledger=ledger,
                )
            except _CALL_FAILURES as exc:
                transcript.layer_states.append(state)
                return _abort(transcript, persist_dir, f"layer {layer} snapshot: {exc}")
            state.snapshot_answer = last_snapshot.text
        transcript.layer_states.append(state)
        _flush(persist_dir, transcript)

    transcript.stop_reason = STOP_MAX_LAYERS
    if config.capture_layer_answers and last_snapshot is not None:
        transcript.final_response = last_snapshot
    else:
        try:
            transcript.final_response = aggregate(
                last_responses,
                NO_RESIDUAL,
                backends.chat,
                query=query,
                template=prompts.baseline_aggregation,
                params=config.sampling,
                layer=config.layers,
                ledger=ledger,
            )
        except _CALL_FAILURES as exc:
            transcript.stop_reason = None
            return _abort(transcript, persist_dir, f"final aggregation: {exc}")
    _flush(persist_dir, transcript)
    return transcript


def run_pipeline(
    query: str,
    config: RunConfig,
    backends: Backends,
    *,
    prompts: PromptSet | None = None,
    ledger: UsageLedger | None = None,
    parallelism: int | None = None,
    persist_dir: Path | None = None,
) -> Transcript:
    """Dispatch to the mode named in the config."""
    runner = run_rmoa if config.mode == "rmoa" else run_moa
    return runner(
        query,
        config,
        backends,
        prompts=prompts,
        ledger=ledger,
        parallelism=parallelism,
        persist_dir=persist_dir,
    )


def _abort(transcript: Transcript, persist_dir: Path | None, reason: str) -> Transcript:
    transcript.events.append(f"aborted: {reason}")
    transcript.stop_reason = STOP_BACKEND_ABORT
    _flush(persist_dir, transcript)
    return transcript

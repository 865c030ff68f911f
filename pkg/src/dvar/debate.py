"""Stage 2: the adversarial debate state machine, one debate per trace.

Two agents argue over each observed anomaly: the generative-hypothesis
advocate (GHA, attack) attributes it to synthesis, the natural-mechanism
advocate (NMA, defense) to ordinary physics or photography. Both open
simultaneously (neither sees the other's hypothesis), then up to
``max_rounds`` rounds run with a fixed speaking order: GHA challenge,
NMA response, NMA challenge, GHA response. The first concession or
unrecoverable schema failure ends the debate immediately, resolved against
the failing agent; surviving both rounds leaves the trace unresolved for
cost adjudication.

"Fails to effectively rebut" is operationalized mechanically: a schema-
invalid response after retries, or a maintain-status response with an
empty rebuttal to a direct challenge. No judge scores argument quality.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Any

from . import prompts
from .backend import ChatProvider, ChatRequest, Message, Stage
from .domain import DvarError, Hypothesis, Stance, Trace, canonical_json
from .knowledge import RetrievalResult
from .parsing import (
    ParseError,
    extract_json_object,
    repair_message,
    require_str_list,
)

logger = logging.getLogger(__name__)

TEMPLATE_ID = "debate.v1"
_OPEN_PROMPTS = {Stance.GEN: "debate_open_gha.v1", Stance.NAT: "debate_open_nma.v1"}
CHALLENGE_PROMPT_ID = "debate_challenge.v1"
RESPONSE_PROMPT_ID = "debate_response.v1"

GHA_LOSS = -1  # resolved value when the generative advocate concedes/fails
NMA_LOSS = +1


class Agent(str, Enum):
    GHA = "GHA"
    NMA = "NMA"

    @property
    def stance(self) -> Stance:
        return Stance.GEN if self is Agent.GHA else Stance.NAT

    @property
    def loss_value(self) -> int:
        return GHA_LOSS if self is Agent.GHA else NMA_LOSS


class TurnStatus(str, Enum):
    MAINTAIN = "maintain"
    CONCEDE = "concede"


class OutcomeKind(str, Enum):
    RESOLVED = "resolved"
    UNRESOLVED = "unresolved"


class AgentFailure(DvarError):
    """An agent could not produce a schema-valid message after retries."""

    def __init__(self, agent: Agent, reason: str) -> None:
        super().__init__(f"{agent.value} failed: {reason}")
        self.agent = agent
        self.reason = reason


@dataclass(frozen=True)
class DebateTurn:
    """One agent utterance: argument, optional challenge/rebuttal, status."""

    agent: Agent
    round: int
    argument: str
    challenge: str = ""
    rebuttal: str = ""
    status: TurnStatus = TurnStatus.MAINTAIN

    def __post_init__(self) -> None:
        object.__setattr__(self, "agent", Agent(self.agent))
        object.__setattr__(self, "status", TurnStatus(self.status))
        if self.round < 1:
            raise ValueError("round must be positive")
        if self.status is TurnStatus.MAINTAIN and not self.argument.strip():
            raise ValueError("maintain turns require a nonempty argument")

    def to_record(self) -> dict[str, Any]:
        return {
            "agent": self.agent.value,
            "round": self.round,
            "argument": self.argument,
            "challenge": self.challenge,
            "rebuttal": self.rebuttal,
            "status": self.status.value,
        }

    @classmethod
    def from_record(cls, rec: dict[str, Any]) -> "DebateTurn":
        return cls(
            agent=Agent(rec["agent"]),
            round=int(rec["round"]),
            argument=rec["argument"],
            challenge=rec.get("challenge", ""),
            rebuttal=rec.get("rebuttal", ""),
            status=TurnStatus(rec["status"]),
        )


@dataclass(frozen=True)
class DebateOutcome:
    kind: OutcomeKind
    value: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", OutcomeKind(self.kind))
        if self.kind is OutcomeKind.RESOLVED:
            if self.value not in (-1, 1):
                raise ValueError("resolved outcome requires value in {-1, +1}")
        elif self.value is not None:
            raise ValueError("unresolved outcome carries no value")

    @classmethod
    def resolved(cls, value: int) -> "DebateOutcome":
        return cls(kind=OutcomeKind.RESOLVED, value=value)

    @classmethod
    def unresolved(cls) -> "DebateOutcome":
        return cls(kind=OutcomeKind.UNRESOLVED)

    def to_record(self) -> dict[str, Any]:
        rec: dict[str, Any] = {"kind": self.kind.value}
        if self.kind is OutcomeKind.RESOLVED:
            rec["value"] = self.value
        return rec

    @classmethod
    def from_record(cls, rec: dict[str, Any]) -> "DebateOutcome":
        return cls(kind=OutcomeKind(rec["kind"]), value=rec.get("value"))


@dataclass(frozen=True)
class DebateRecord:
    """Full structured transcript and outcome of one trace's debate."""

    trace_id: str
    turns: tuple[DebateTurn, ...]
    outcome: DebateOutcome
    hypothesis_gen: Hypothesis
    hypothesis_nat: Hypothesis
    rounds_used: int
    kb_context_digest: str
    template_id: str = TEMPLATE_ID

    def __post_init__(self) -> None:
        object.__setattr__(self, "turns", tuple(self.turns))
        if self.rounds_used < 0:
            raise ValueError("rounds_used must be non-negative")
        last_round = 0
        for i, turn in enumerate(self.turns):
            if turn.round < last_round:
                raise ValueError("turns must be ordered by round")
            last_round = turn.round
            if turn.status is TurnStatus.CONCEDE and i != len(self.turns) - 1:
                raise ValueError("no turn may follow a concede turn")
        if self.turns and self.turns[-1].status is TurnStatus.CONCEDE:
            expected = self.turns[-1].agent.loss_value
            if self.outcome.kind is not OutcomeKind.RESOLVED or self.outcome.value != expected:
                raise ValueError("concede turn must resolve against the conceding agent")

    def to_record(self) -> dict[str, Any]:
        return {
            "trace_id": self.trace_id,
            "turns": [t.to_record() for t in self.turns],
            "outcome": self.outcome.to_record(),
            "hypothesis_gen": self.hypothesis_gen.to_record(),
            "hypothesis_nat": self.hypothesis_nat.to_record(),
            "rounds_used": self.rounds_used,
            "kb_context_digest": self.kb_context_digest,
            "template_id": self.template_id,
        }

    @classmethod
    def from_record(cls, rec: dict[str, Any]) -> "DebateRecord":
        return cls(
            trace_id=rec["trace_id"],
            turns=tuple(DebateTurn.from_record(t) for t in rec["turns"]),
            outcome=DebateOutcome.from_record(rec["outcome"]),
            hypothesis_gen=Hypothesis.from_record(rec["hypothesis_gen"]),
            hypothesis_nat=Hypothesis.from_record(rec["hypothesis_nat"]),
            rounds_used=int(rec["rounds_used"]),
            kb_context_digest=rec["kb_context_digest"],
            template_id=rec.get("template_id", TEMPLATE_ID),
        )


@dataclass(frozen=True)
class DebateConfig:
    max_rounds: int = 2
    parse_retries: int = 1
    temperature: float = 0.0
    max_output_tokens: int = 1024

    def __post_init__(self) -> None:
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be at least 1")
        if self.parse_retries < 0:
            raise ValueError("parse_retries must be non-negative")


def parse_turn(raw: str, agent: Agent = Agent.GHA, round_number: int = 1) -> DebateTurn:
    """Parse one structured turn; raises ParseError naming the bad fields."""
    turn, _ = _parse_turn_payload(raw, agent, round_number)
    return turn


def _parse_turn_payload(
    raw: str, agent: Agent, round_number: int
) -> tuple[DebateTurn, tuple[str, ...]]:
    obj = extract_json_object(raw)
    problems = []
    status = obj.get("status")
    if status not in (TurnStatus.MAINTAIN.value, TurnStatus.CONCEDE.value):
        problems.append(f"status {status!r} not in {{maintain, concede}}")
    for key in ("argument", "challenge", "rebuttal"):
        if not isinstance(obj.get(key, ""), str):
            problems.append(f"field {key!r} must be a string")
    if problems:
        raise ParseError("; ".join(problems))
    assumptions = tuple(require_str_list(obj, "assumptions", default=True))
    argument = obj.get("argument", "")
    if status == TurnStatus.MAINTAIN.value and not argument.strip():
        raise ParseError("maintain turns require a nonempty argument")
    turn = DebateTurn(
        agent=agent,
        round=round_number,
        argument=argument,
        challenge=obj.get("challenge", ""),
        rebuttal=obj.get("rebuttal", ""),
        status=TurnStatus(status),
    )
    return turn, assumptions


def _parse_hypothesis(raw: str, stance: Stance) -> Hypothesis:
    obj = extract_json_object(raw)
    statement = obj.get("statement")
    if not isinstance(statement, str) or not statement.strip():
        raise ParseError("field 'statement' missing or empty")
    assumptions = tuple(require_str_list(obj, "assumptions", default=True))
    return Hypothesis(stance=stance, statement=statement, assumptions=assumptions)


class _AgentThread:
    """One agent's growing conversation within a single debate."""

    def __init__(
        self,
        agent: Agent,
        trace: Trace,
        kb_result: RetrievalResult,
        config: DebateConfig,
        provider: ChatProvider,
        session_id: str,
    ) -> None:
        self.agent = agent
        self.config = config
        self.provider = provider
        self.session_id = session_id
        opening_task = (
            f"Trace {trace.trace_id} ({trace.category.value}): {trace.description}\n"
            f"Observed on frames {list(trace.frame_indices)}.\n\n"
            f"Reference guidance:\n{kb_result.guidance_text()}\n\n"
            "State your hypothesis."
        )
        self.messages: list[Message] = [
            ("system", prompts.load(_OPEN_PROMPTS[agent.stance])),
            ("user", opening_task),
        ]

    def _exchange(self, parse):
        """Send the thread, parse the reply, retrying with repair prompts."""
        attempt = list(self.messages)
        last_error: ParseError | None = None
        for _ in range(self.config.parse_retries + 1):
            request = ChatRequest(
                session_id=self.session_id,
                stage=Stage.DEBATE,
                messages=tuple(attempt),
                temperature=self.config.temperature,
                max_output_tokens=self.config.max_output_tokens,
            )
            text = self.provider.complete(request).text
            try:
                value = parse(text)
            except ParseError as exc:
                last_error = exc
                logger.warning("%s schema failure: %s", self.agent.value, exc)
                attempt = attempt + [("assistant", text), repair_message(exc)]
                continue
            self.messages = attempt + [("assistant", text)]
            return value
        raise AgentFailure(self.agent, f"schema-invalid after retries: {last_error}")

    def open(self) -> Hypothesis:
        return self._exchange(lambda text: _parse_hypothesis(text, self.agent.stance))

    def take_turn(self, prompt: str, round_number: int) -> tuple[DebateTurn, tuple[str, ...]]:
        self.messages = self.messages + [("user", prompt)]
        return self._exchange(
            lambda text: _parse_turn_payload(text, self.agent, round_number)
        )


def open_debate(
    trace: Trace,
    kb_result: RetrievalResult,
    provider: ChatProvider,
    config: DebateConfig = DebateConfig(),
    session_id: str | None = None,
) -> tuple[Hypothesis, Hypothesis]:
    """Form both opening hypotheses independently; (gen, nat).

    Raises AgentFailure when either side cannot produce a valid hypothesis.
    """
    session = session_id or f"debate:{trace.trace_id}"
    gha = _AgentThread(Agent.GHA, trace, kb_result, config, provider, session)
    nma = _AgentThread(Agent.NMA, trace, kb_result, config, provider, session)
    return gha.open(), nma.open()


def _merge_assumptions(base: tuple[str, ...], extra: list[str]) -> tuple[str, ...]:
    merged = list(base)
    for item in extra:
        if item not in merged:
            merged.append(item)
    return tuple(merged)


_PLACEHOLDER = "(no schema-valid hypothesis was produced)"


def run_debate(
    trace: Trace,
    kb_result: RetrievalResult,
    config: DebateConfig,
    provider: ChatProvider,
    session_id: str | None = None,
    *,
    rounds_enabled: bool = True,
) -> DebateRecord:
    """Run the full adversarial exchange for one trace.

    ``rounds_enabled=False`` stops after the opening hypotheses (ablation
    path): every surviving trace is unresolved with rounds_used = 0.
    """
    session = session_id or f"debate:{trace.trace_id}"
    gha = _AgentThread(Agent.GHA, trace, kb_result, config, provider, session)
    nma = _AgentThread(Agent.NMA, trace, kb_result, config, provider, session)
    threads = {Agent.GHA: gha, Agent.NMA: nma}
    hypotheses: dict[Agent, Hypothesis] = {}
    extra_assumptions: dict[Agent, list[str]] = {Agent.GHA: [], Agent.NMA: []}
    turns: list[DebateTurn] = []

    def record(outcome: DebateOutcome, rounds_used: int) -> DebateRecord:
        def final(agent: Agent) -> Hypothesis:
            hyp = hypotheses.get(agent)
            if hyp is None:
                return Hypothesis(stance=agent.stance, statement=_PLACEHOLDER)
            return Hypothesis(
                stance=hyp.stance,
                statement=hyp.statement,
                assumptions=_merge_assumptions(
                    hyp.assumptions, extra_assumptions[agent]
                ),
            )

        return DebateRecord(
            trace_id=trace.trace_id,
            turns=tuple(turns),
            outcome=outcome,
            hypothesis_gen=final(Agent.GHA),
            hypothesis_nat=final(Agent.NMA),
            rounds_used=rounds_used,
            kb_context_digest=kb_result.context_digest(),
        )

    # Simultaneous opening: neither request includes the other's hypothesis.
    for agent in (Agent.GHA, Agent.NMA):
        try:
            hypotheses[agent] = threads[agent].open()
        except AgentFailure as failure:
            logger.info("%s lost trace %s at opening", failure.agent.value, trace.trace_id)
            return record(DebateOutcome.resolved(failure.agent.loss_value), 0)

    if not rounds_enabled:
        return record(DebateOutcome.unresolved(), 0)

    def challenge(agent: Agent, round_number: int) -> DebateTurn:
        opponent = Agent.NMA if agent is Agent.GHA else Agent.GHA
        prompt = prompts.render(
            CHALLENGE_PROMPT_ID,
            round=str(round_number),
            opponent_statement=hypotheses[opponent].statement,
        )
        turn, assumptions = threads[agent].take_turn(prompt, round_number)
        extra_assumptions[agent].extend(assumptions)
        turns.append(turn)
        return turn

    def respond(agent: Agent, challenge_text: str, round_number: int) -> DebateTurn:
        prompt = prompts.render(
            RESPONSE_PROMPT_ID, round=str(round_number), challenge=challenge_text
        )
        turn, assumptions = threads[agent].take_turn(prompt, round_number)
        extra_assumptions[agent].extend(assumptions)
        turns.append(turn)
        if turn.status is TurnStatus.MAINTAIN and not turn.rebuttal.strip():
            raise AgentFailure(agent, "maintain response with empty rebuttal")
        return turn

    for round_number in range(1, config.max_rounds + 1):
        # GHA challenge -> NMA response -> NMA challenge -> GHA response;
        # first concession or failure terminates immediately.
        try:
            gha_challenge = challenge(Agent.GHA, round_number)
            if gha_challenge.status is TurnStatus.CONCEDE:
                return record(DebateOutcome.resolved(GHA_LOSS), round_number)
            nma_response = respond(Agent.NMA, gha_challenge.challenge, round_number)
            if nma_response.status is TurnStatus.CONCEDE:
                return record(DebateOutcome.resolved(NMA_LOSS), round_number)
            nma_challenge = challenge(Agent.NMA, round_number)
            if nma_challenge.status is TurnStatus.CONCEDE:
                return record(DebateOutcome.resolved(NMA_LOSS), round_number)
            gha_response = respond(Agent.GHA, nma_challenge.challenge, round_number)
            if gha_response.status is TurnStatus.CONCEDE:
                return record(DebateOutcome.resolved(GHA_LOSS), round_number)
        except AgentFailure as failure:
            logger.info(
                "%s lost trace %s in round %d (%s)",
                failure.agent.value,
                trace.trace_id,
                round_number,
                failure.reason,
            )
            return record(
                DebateOutcome.resolved(failure.agent.loss_value), round_number
            )

    return record(DebateOutcome.unresolved(), config.max_rounds)


def transcript_text(record: DebateRecord) -> str:
    """Deterministic plain-text rendering of a debate for downstream prompts."""
    lines = [
        f"Trace {record.trace_id}",
        f"Generative hypothesis: {record.hypothesis_gen.statement}",
        f"  assumptions: {canonical_json(list(record.hypothesis_gen.assumptions))}",
        f"Natural hypothesis: {record.hypothesis_nat.statement}",
        f"  assumptions: {canonical_json(list(record.hypothesis_nat.assumptions))}",
    ]
    for turn in record.turns:
        lines.append(
            f"[round {turn.round}] {turn.agent.value} ({turn.status.value}): "
            f"argument: {turn.argument} | challenge: {turn.challenge} | "
            f"rebuttal: {turn.rebuttal}"
        )
    return "\n".join(lines)

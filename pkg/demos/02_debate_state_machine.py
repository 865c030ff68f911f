"""The adversarial debate state machine, driven by a scripted provider.

Each observed anomaly gets its own debate: the generative-hypothesis
advocate (GHA) opens the attack, the natural-mechanism advocate (NMA)
defends. Speaking order per round is GHA challenge, NMA response, NMA
challenge, GHA response; the first concession or schema failure ends the
debate against that agent, otherwise the trace stays unresolved for cost
adjudication.
"""

import json

from dvar.backend import CallbackProvider
from dvar.debate import DebateConfig, run_debate, transcript_text
from dvar.domain import Trace, TraceCategory
from dvar.knowledge import RetrievalResult

TRACE = Trace(
    trace_id="t1",
    description="grass blades stay unnaturally straight while the camera pans",
    category=TraceCategory.PHYSICAL,
    frame_indices=(3, 4, 5),
)


def scripted_agents(nma_concedes_in_round=None):
    """Respond per role; optionally have NMA concede in a given round."""

    def respond(request):
        system = request.messages[0][1]
        agent = "GHA" if "generative-hypothesis advocate" in system else "NMA"
        prompt = next(
            t for r, t in reversed(request.messages)
            if r == "user" and "failed validation" not in t
        )
        if "State your hypothesis." in prompt:
            statement = (
                "temporal attention failure flattens thin structures"
                if agent == "GHA"
                else "windless morning and stiff blades keep the lawn still"
            )
            return json.dumps({"statement": statement, "assumptions": []})
        round_number = int(prompt.split("Round ", 1)[1].split(".", 1)[0])
        if "The opposing hypothesis reads:" in prompt:
            return json.dumps(
                {
                    "status": "maintain",
                    "argument": f"{agent} stands by its account",
                    "challenge": f"{agent} asks round {round_number}: explain the uniform stillness",
                    "rebuttal": "",
                    "assumptions": [],
                }
            )
        if agent == "NMA" and round_number == nma_concedes_in_round:
            return json.dumps(
                {"status": "concede", "argument": "", "challenge": "", "rebuttal": "",
                 "assumptions": []}
            )
        return json.dumps(
            {
                "status": "maintain",
                "argument": f"{agent} still explains the stillness",
                "challenge": "",
                "rebuttal": f"{agent} round {round_number}: the observation fits my account",
                "assumptions": [],
            }
        )

    return CallbackProvider(respond)


print("== debate that runs the full two rounds (unresolved) ==")
record = run_debate(TRACE, RetrievalResult.empty(), DebateConfig(), scripted_agents(), "demo")
print(transcript_text(record))
print(f"outcome: {record.outcome.to_record()}, rounds used: {record.rounds_used}")

print("\n== early termination: NMA concedes in round 1 -> resolved +1 ==")
record = run_debate(
    TRACE, RetrievalResult.empty(), DebateConfig(), scripted_agents(nma_concedes_in_round=1), "demo"
)
print(f"turns recorded: {len(record.turns)} (nothing follows the concession)")
print(f"outcome: {record.outcome.to_record()}, rounds used: {record.rounds_used}")
print("+1 means the generative side prevailed on this trace")

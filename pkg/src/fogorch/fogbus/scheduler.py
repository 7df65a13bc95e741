"""Round-robin actor selection for the Master."""

from __future__ import annotations

from dataclasses import dataclass, field


class EmptyRosterError(LookupError):
    pass


@dataclass
class SchedulerState:
    roster: list[str] = field(default_factory=list)
    cursor: int = 0

    def add(self, actor: str):
        if actor not in self.roster:
            self.roster.append(actor)

    def remove(self, actor: str):
        idx = self.roster.index(actor)
        del self.roster[idx]
        # the actor after the removed one slides into its slot
        if idx < self.cursor:
            self.cursor -= 1
        if self.cursor >= len(self.roster):
            self.cursor = 0


def round_robin_next(state: SchedulerState) -> str:
    if not state.roster:
        raise EmptyRosterError("no actors registered")
    actor = state.roster[state.cursor]
    state.cursor = (state.cursor + 1) % len(state.roster)
    return actor

"""The benchmark application: a three-part arithmetic task."""

from __future__ import annotations

from dataclasses import dataclass


class CalculationError(ZeroDivisionError):
    """Division by zero inside the task; ``term`` names the failing expression."""

    def __init__(self, term: str):
        super().__init__(f"division by zero in {term}")
        self.term = term


@dataclass(frozen=True)
class CalcInput:
    a: float
    b: float
    c: float

    def to_json(self) -> dict:
        return {"a": self.a, "b": self.b, "c": self.c}

    @classmethod
    def from_json(cls, data: dict) -> CalcInput:
        return cls(data["a"], data["b"], data["c"])


@dataclass(frozen=True)
class CalcOutput:
    part0: float
    part1: float
    part2: float
    final: float

    def to_json(self) -> dict:
        return {"part0": self.part0, "part1": self.part1, "part2": self.part2, "final": self.final}

    @classmethod
    def from_json(cls, data: dict) -> CalcOutput:
        return cls(data["part0"], data["part1"], data["part2"], data["final"])


def execute_calculation(inp: CalcInput) -> CalcOutput:
    a, b, c = inp.a, inp.b, inp.c
    part0 = a + b + c
    a += 1
    b += 1
    c += 1
    denominator = b * b + c * c
    if denominator == 0:
        raise CalculationError("resultPart1: b*b + c*c")
    part1 = a * a / denominator
    a += 1
    b += 1
    c += 1
    for term, value in (("1/a", a), ("2/b", b), ("3/c", c)):
        if value == 0:
            raise CalculationError(f"resultPart2: {term}")
    part2 = 1 / a + 2 / b + 3 / c
    return CalcOutput(part0, part1, part2, part0 + part1 + part2)

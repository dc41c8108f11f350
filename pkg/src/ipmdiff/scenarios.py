"""Bundled scenario library.

Push magnitudes are synthetic stand-ins labelled weak/medium/strong by
convention; forces are in Newtons in the pushed agent's local frame.
"""

from __future__ import annotations

from .simulator import AgentInit, PushEvent, Scenario

SPACING = 0.4
PUSH_FRAMES = 12
WEAK, MEDIUM, STRONG = 60.0, 150.0, 300.0


def _single(force: float, name: str) -> Scenario:
    return Scenario(agents=[AgentInit()], pushes=[PushEvent(0, 0, PUSH_FRAMES, (force, 0.0, 0.0))],
                    horizon=120, mode="single", name=name)


def _line(n: int, force: float, duration: int, horizon: int, name: str) -> Scenario:
    agents = [AgentInit(state=(SPACING * i, 0.0, 0.0, 0.0)) for i in range(n)]
    return Scenario(agents=agents, pushes=[PushEvent(0, 0, duration, (force, 0.0, 0.0))],
                    horizon=horizon, mode="multi", name=name)


def single_weak():
    """One agent, weak forward push at the rod end."""
    return _single(WEAK, "single_weak")


def single_medium():
    """One agent, medium forward push at the rod end."""
    return _single(MEDIUM, "single_medium")


def single_strong():
    """One agent, strong forward push at the rod end."""
    return _single(STRONG, "single_strong")


def line4():
    """Four agents in a line; the back agent is pushed forward."""
    return _line(4, 400.0, PUSH_FRAMES, 120, "line4")


def line5():
    """Five agents in a line; the back agent is pushed forward."""
    return _line(5, 400.0, PUSH_FRAMES, 120, "line5")


def line10():
    """Ten agents 0.4 m apart along +x; the back agent (index 0) is pushed forward."""
    return _line(10, 800.0, 20, 180, "line10")


def twolines4():
    """Two parallel lines of four, 0.45 m apart; both back agents are pushed."""
    agents = [AgentInit(state=(SPACING * i, y, 0.0, 0.0)) for y in (-0.225, 0.225) for i in range(4)]
    pushes = [PushEvent(0, 0, PUSH_FRAMES, (400.0, 0.0, 0.0)), PushEvent(4, 0, PUSH_FRAMES, (400.0, 0.0, 0.0))]
    return Scenario(agents=agents, pushes=pushes, horizon=120, mode="multi", name="twolines4")


def diamond13(spacing: float = 0.45):
    """Rows of 1, 3, 5, 3, 1 agents along +x; the three agents of the second row are pushed."""
    agents = []
    for r, k in enumerate((1, 3, 5, 3, 1)):
        agents += [AgentInit(state=(spacing * r, spacing * (i - (k - 1) / 2), 0.0, 0.0)) for i in range(k)]
    pushes = [PushEvent(a, 0, PUSH_FRAMES, (500.0, 0.0, 0.0)) for a in (1, 2, 3)]
    return Scenario(agents=agents, pushes=pushes, horizon=180, mode="multi", name="diamond13")


def multiphase_push():
    """One agent pushed three times: weak at frame 0, medium at 15, strong at 50."""
    pushes = [PushEvent(0, start, PUSH_FRAMES, (f, 0.0, 0.0)) for start, f in ((0, WEAK), (15, MEDIUM), (50, STRONG))]
    return Scenario(agents=[AgentInit()], pushes=pushes, horizon=150, mode="single", name="multiphase_push")


LIBRARY = {
    "single_weak": single_weak,
    "single_medium": single_medium,
    "single_strong": single_strong,
    "line4": line4,
    "twolines4": twolines4,
    "line5": line5,
    "line10": line10,
    "diamond13": diamond13,
    "multiphase_push": multiphase_push,
}
ALIASES = {"single_strong_push": "single_strong"}


def get(name: str) -> Scenario:
    key = ALIASES.get(name, name)
    if key not in LIBRARY:
        raise KeyError(f"unknown scenario {name!r}; available: {', '.join(LIBRARY)}")
    return LIBRARY[key]().validate()

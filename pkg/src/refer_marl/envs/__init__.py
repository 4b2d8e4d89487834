from .base import Env, StepAfterTerminal, TraceRecorder, read_trace
from .coop_targets import CoopTargets
from .pursuit import PursuitLite

ENVIRONMENTS = {
    "coop_targets": CoopTargets,
    "pursuit": PursuitLite,
}


def make_env(name: str, **kwargs) -> Env:
    try:
        cls = ENVIRONMENTS[name]
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; expected one of {sorted(ENVIRONMENTS)}") from None
    return cls(**kwargs)


__all__ = ["Env", "CoopTargets", "PursuitLite", "StepAfterTerminal", "TraceRecorder", "read_trace",
           "ENVIRONMENTS", "make_env"]

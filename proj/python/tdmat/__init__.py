"""Python access to the tdmat library.

The ``cmd_*`` functions mirror the command line tool and return
``(exit_code, stdout, stderr)``.
"""

from ._core import (
    ConfigError,
    GameSpec,
    ParseError,
    Spec,
    TraceError,
    Trajectory,
    WorldState,
    build_reach_task,
    build_task_1,
    build_task_2,
    cmd_eval,
    cmd_monitor,
    cmd_train,
    cmd_verify,
    conjoin,
    done,
    entity_names,
    entity_positions,
    evaluate,
    observe,
    parse_spec,
    prefix_robustness,
    reset,
    robustness,
    step,
    wald_interval,
    z_value,
)

__all__ = [name for name in dir() if not name.startswith("_")]

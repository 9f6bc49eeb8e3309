"""Handlers package."""

from .commands import cmd_bench, cmd_cost, cmd_verify, run_benchmark
from .tensor_commands import cmd_influence, cmd_run, influence_magnitude

__all__ = ['cmd_verify', 'cmd_cost', 'cmd_bench', 'run_benchmark', 'cmd_run', 'cmd_influence',
           'influence_magnitude']

"""
Command Registration Hub

Imports all command modules to trigger @register_command decorators
and aggregates all command schemas for the argument parser.

Command modules:
- experiments: make-tasks, train, adapt, eval, baseline (5 commands)
- diagnostics: gradcheck, bench-metagrad (2 commands)
"""

# Import command modules to trigger handler registration
from commands.experiments import EXPERIMENT_SCHEMAS
from commands.diagnostics import DIAGNOSTIC_SCHEMAS

# Aggregated schema registry for all commands
ALL_COMMAND_SCHEMAS = {
    **EXPERIMENT_SCHEMAS,
    **DIAGNOSTIC_SCHEMAS,
}

# Group registry: maps group name -> {description, commands, schemas}
COMMAND_GROUPS = {
    "experiments": {
        "description": "Task sets, meta-training, adaptation and evaluation",
        "commands": list(EXPERIMENT_SCHEMAS.keys()),
        "schemas": EXPERIMENT_SCHEMAS,
    },
    "diagnostics": {
        "description": "Derivative checks and backend benchmarks",
        "commands": list(DIAGNOSTIC_SCHEMAS.keys()),
        "schemas": DIAGNOSTIC_SCHEMAS,
    },
}

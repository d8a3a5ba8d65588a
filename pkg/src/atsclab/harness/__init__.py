from .config import (
    ConfigError,
    IqlConfig,
    RmspropConfig,
    RunConfig,
    SimConfig,
    config_digest,
    config_from_doc,
    config_to_doc,
    load_config,
    validate_config,
    write_config_snapshot,
)
from .checkpoint import (
    CheckpointError,
    checkpoint_digest,
    load_agent_docs,
    load_run_state,
    restore_trainer,
    save_checkpoint,
)
from . import runner
from .cli import cli

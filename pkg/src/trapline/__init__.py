"""trapline: honeypot session orchestration and malware-forensics toolkit.

Per inbound connection: an isolated environment from a warm pool, filesystem
mutations as a content-addressed commit history, per-session pcap capture,
exec trust verdicts against a baseline whitelist, instruction tracing of
alien binaries with memory-write-triggered process snapshots, and a live
event feed over WebSockets.
"""
from .clock import SimClock, WallClock
from .events import Event
from .orchestrator import (Orchestrator, OrchestratorConfig, Session,
                           SessionRecord, run_attacker_script)
from .sandbox import (EnvironmentTemplate, SandboxManager, ScriptedDriver,
                      load_template_dir)
from .script import AttackScript, load_script, parse_script

__version__ = "0.1.0"

__all__ = [
    "AttackScript", "Event", "EnvironmentTemplate", "Orchestrator",
    "OrchestratorConfig", "SandboxManager", "ScriptedDriver", "Session",
    "SessionRecord", "SimClock", "WallClock", "load_script",
    "load_template_dir", "parse_script", "run_attacker_script",
    "__version__",
]

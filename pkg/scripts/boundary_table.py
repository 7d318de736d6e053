#!/usr/bin/env python3
"""Print efficacy boundaries for the null SMART1 and SMART2 scenarios at 50% information."""

from dataclasses import replace
from pathlib import Path

from dotenv import load_dotenv

# Load .env from repository root
repo_root = Path(__file__).parent.parent
load_dotenv(repo_root / ".env")

from smart_monitor.config import Config  # noqa: E402
from smart_monitor.errors import SmartMonitorError  # noqa: E402
from smart_monitor.monitoring import derive_boundaries  # noqa: E402
from smart_monitor.simulation import generate_trial, preset  # noqa: E402

ROWS = [
    ("pocock", False),
    ("pocock", True),
    ("obf", False),
    ("obf", True),
    ("ld-pocock", True),
    ("ld-obf", True),
]

Config.setup_logging()

try:
    for name in ("null-smart1", "null-smart2"):
        scenario = replace(preset(name), n=10_000)
        records = generate_trial(scenario, seed=Config.DEFAULT_SEED)

        print("=" * 60)
        print(f"Scenario: {name} (n={scenario.n:,}, draws={Config.BOUNDARY_DRAWS:,})")
        print("=" * 60)
        print(f"{'boundary':<20} {'stat':<5} {'b_1':>10} {'b_2':>10}")
        for kind in ("LR", "TD"):
            for method, oracle in ROWS:
                result = derive_boundaries(records, scenario.design, kind=kind, method=method, oracle=oracle)
                b1, b2 = result.thresholds
                print(f"{result.label:<20} {kind:<5} {b1:>10.2f} {b2:>10.2f}")
        print()

except SmartMonitorError as e:
    print(f"Error: {e}")
    print("\nMake sure:")
    print("  1. Your .env settings are within their documented ranges")
    print("  2. SMART_BOUNDARY_DRAWS is large enough for stable quantiles")

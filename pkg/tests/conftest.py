from __future__ import annotations

import json

import pytest

# The four-drafter weekly-report workflow used throughout the suite as the
# canonical small example: three parallel drafting agents fanning into a
# selector that produces the final report.
WEEKLY_REPORT_DOC = {
    "edges": [
        {"source": "ENTRY", "target": "DrafterA"},
        {"source": "ENTRY", "target": "DrafterB"},
        {"source": "ENTRY", "target": "DrafterC"},
        {"source": "DrafterA", "target": "Finalizer"},
        {"source": "DrafterB", "target": "Finalizer"},
        {"source": "DrafterC", "target": "Finalizer"},
        {"source": "Finalizer", "target": "EXIT"},
    ],
    "nodes": [
        {
            "id": "DrafterA",
            "type": "Action",
            "input_fields": ["my_work"],
            "output_fields": ["draft_report_a"],
            "instructions": "You are Weekly Report Drafting Agent A. Draft a concise weekly report.",
        },
        {
            "id": "DrafterB",
            "type": "Action",
            "input_fields": ["my_work"],
            "output_fields": ["draft_report_b"],
            "instructions": "You are Weekly Report Drafting Agent B. Draft a detailed weekly report.",
        },
        {
            "id": "DrafterC",
            "type": "Action",
            "input_fields": ["my_work"],
            "output_fields": ["draft_report_c"],
            "instructions": "You are Weekly Report Drafting Agent C. Draft a narrative weekly report.",
        },
        {
            "id": "Finalizer",
            "type": "Action",
            "input_fields": ["my_work", "draft_report_a", "draft_report_b", "draft_report_c"],
            "output_fields": ["final_weekly_report", "selection_rationale"],
            "instructions": "You are the Weekly Report Evaluator. Select and polish the best draft.",
        },
    ],
}


@pytest.fixture
def weekly_report_text() -> str:
    return json.dumps(WEEKLY_REPORT_DOC, indent=2)


@pytest.fixture
def weekly_report_spec(weekly_report_text):
    from agentgraph.ir import parse_spec

    return parse_spec(weekly_report_text)

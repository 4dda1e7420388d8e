import json
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional

from longidesign.model.schema import Scenario


class DesignReport:
    """
    Results of one CLI question together with the scenario that produced them,
    so that any saved report can be replayed.
    """

    def __init__(self, question: str, scenario: Optional[Scenario] = None,
                 results: Optional[List[Dict[str, Any]]] = None):
        """
        Args:
            question: subcommand that produced the results (power, n, optimal, ...)
            scenario: validated input scenario (None for tables and verify)
            results: one dict per output row
        """
        self.question = question
        self.scenario = scenario
        self.results = results or []
        self.created: str = datetime.now(timezone.utc).isoformat(timespec="seconds")

    def add(self, **row: Any):
        self.results.append(row)

    def columns(self) -> List[str]:
        cols: List[str] = []
        for row in self.results:
            cols.extend(k for k in row if k not in cols)
        return cols

    def to_dict(self) -> Dict:
        """
        Serialize the report for JSON storage.
        """
        return {
            "question": self.question,
            "created": self.created,
            "scenario": self.scenario.model_dump(mode="json") if self.scenario else None,
            "results": self.results,
        }

    def save_to_json(self, output_path: Path):
        output_path = Path(output_path)
        output_path.parent.mkdir(parents=True, exist_ok=True)
        with open(output_path, 'w', encoding='utf-8') as f:
            json.dump(self.to_dict(), f, indent=2, ensure_ascii=False)

    @classmethod
    def from_json(cls, json_path: Path) -> 'DesignReport':
        """
        Load a report saved by save_to_json.
        """
        with open(json_path, 'r', encoding='utf-8') as f:
            data = json.load(f)
        scenario = Scenario.model_validate(data["scenario"]) if data.get("scenario") else None
        report = cls(question=data["question"], scenario=scenario, results=data.get("results", []))
        report.created = data.get("created", report.created)
        return report

    def __repr__(self) -> str:
        name = self.scenario.name if self.scenario else "-"
        return f"DesignReport(question={self.question}, scenario={name}, rows={len(self.results)})"

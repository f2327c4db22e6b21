from __future__ import annotations

import json

from mockscript import CT, FF, MD, PIH

from phishintent.core import LabelSet
from phishintent.dataset import load_manifest
from phishintent.importer import import_table, row_labels, split_labels


def test_split_labels_shapes():
    assert split_labels("Credential Theft; Personal Information Harvesting") == [
        "Credential Theft", "Personal Information Harvesting"]
    assert split_labels('["a", "b"]') == ["a", "b"]
    assert split_labels(["a"]) == ["a"]
    assert split_labels(None) == [] and split_labels("") == []


def test_flag_columns():
    row = {"id": "1", "credential_theft": "1", "Financial Fraud": "no", "malware_distribution": "x"}
    assert row_labels(row, None) == LabelSet([CT, MD])
    assert row_labels({"id": "1", "credential_theft": "0"}, None) is None


def test_import_csv_with_labels_column(tmp_path):
    (tmp_path / "shots").mkdir()
    (tmp_path / "shots" / "a.png").write_bytes(b"x")
    table = tmp_path / "t.csv"
    table.write_text(
        "id,screenshot,sector,labels\n"
        'a,shots/a.png,Financial,"Credential Theft; Personal Information Harvesting"\n'
        "b,,,financial_fraud\n"
        "c,,,\n",
        encoding="utf-8",
    )
    out = tmp_path / "out" / "m.jsonl"
    out.parent.mkdir()
    import_table(table, out)
    m = load_manifest(out)
    assert [s.true_labels for s in m] == [LabelSet([CT, PIH]), LabelSet([FF]), None]
    assert m.samples[0].screenshot == (tmp_path / "shots" / "a.png").resolve()
    assert m.samples[0].sector == "financial"
    assert json.loads(out.read_text().splitlines()[0])["screenshot"] == "../shots/a.png"


def test_import_csv_with_flag_columns(tmp_path):
    table = tmp_path / "t.csv"
    table.write_text("id,credential_theft,financial_fraud,malware_distribution,personal_info_harvesting\n"
                     "1,1,0,0,1\n2,0,0,1,0\n", encoding="utf-8")
    m = import_table(table, tmp_path / "m.jsonl", screenshot_column=None, sector_column=None)
    assert [s.true_labels for s in m] == [LabelSet([CT, PIH]), LabelSet([MD])]


def test_import_json_records(tmp_path):
    table = tmp_path / "t.json"
    table.write_text(json.dumps({"records": [{"uid": 7, "labels": ["Malware Distribution"]}]}), encoding="utf-8")
    m = import_table(table, tmp_path / "m.jsonl", id_column="uid")
    assert m.samples[0].id == "7" and m.samples[0].true_labels == LabelSet([MD])

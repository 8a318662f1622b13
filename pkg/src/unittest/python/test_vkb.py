import difflib
import json
import tempfile
import unittest
from pathlib import Path
from unittest import mock

import support

from recurvuln.diffs import apply_unified_diff, render_unified_diff
from recurvuln.errors import (
    CommitUnreachableError,
    CveNotFoundError,
    DistillationError,
    RecordNotFoundError,
    RecordParseError,
    TemplateViolationError,
)
from recurvuln.llm_gateway import LLMGateway, ProviderConfig, ScriptedProvider
from recurvuln.vkb import (
    AnalysisPoint,
    LiveSource,
    OfflineBundle,
    VkbStore,
    VulnRecord,
    build_record,
    distill_points,
    extract_symbols,
    generate_report,
    ingest_basic,
    parse_commit_url,
    parse_report_sections,
)

KVASER_URL = f"https://github.com/{support.KVASER_REPO}/commit/{support.KVASER_SHA}"

FULL_REPORT = """## Vulnerability Description
Kernel memory reaches the device.

## CWE Category
CWE-908

**3. Root Cause Analysis:**
The buffer comes from kmalloc.

### Vulnerability Trigger Chain
kvaser_usb_leaf_send_simple_cmd -> kvaser_usb_send_cmd

## Patch Analysis
kzalloc zeroes the buffer.
"""

PARTIAL_REPORT = FULL_REPORT.split("## Patch Analysis")[0]

POINTS_TEXT = """Analysis points:
1. The `struct kvaser_cmd` buffer is allocated with `kmalloc`
2) Only some fields are written before `kvaser_usb_send_cmd`
3. Padding of `kvaser_cmd_simple` is never cleared
"""


def gateway(scripts):
    return LLMGateway(ProviderConfig(provider_kind="scripted"), ScriptedProvider(scripts))


class TestIngest(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.bundle = OfflineBundle(support.write_offline_bundle(
            self.tmp.name, support.KVASER_CVE, support.KVASER_SHA,
            {support.KVASER_FILE: support.KVASER_SOURCE_PRE},
            {support.KVASER_FILE: support.KVASER_SOURCE_POST},
            description="kvaser_usb leaks kernel memory", cwes=("CWE-908", "CWE-200"),
            message="can: kvaser_usb: kvaser_usb_leaf: Fix some info-leaks to USB devices"))

    def tearDown(self):
        self.tmp.cleanup()

    def test_single_function_commit(self):
        basic = ingest_basic(support.KVASER_CVE, KVASER_URL, self.bundle)
        self.assertEqual(basic.repo_name, support.KVASER_REPO)
        self.assertEqual(basic.cwe_id, "CWE-908")
        self.assertIn("CWE-200", basic.notes)
        self.assertTrue(basic.commit_message.startswith("can: kvaser_usb"))
        (function,) = basic.vulnerable_functions
        self.assertEqual(function.function_name, support.KVASER_FN)
        changed = [line for line in difflib.ndiff(function.pre_patch_source.split("\n"),
                                                  function.post_patch_source.split("\n"))
                   if line[:2] in ("- ", "+ ")]
        self.assertEqual([" ".join(line.split()) for line in changed],
                         ["- cmd = kmalloc(sizeof(*cmd), GFP_KERNEL);", "+ cmd = kzalloc(sizeof(*cmd), GFP_KERNEL);"])
        self.assertEqual(basic.file_level_hunks, [])

    def test_hunks_reproduce_post_patch_file(self):
        basic = ingest_basic(support.KVASER_CVE, KVASER_URL, self.bundle)
        (patched,) = basic.patched_files
        self.assertEqual(apply_unified_diff(support.KVASER_SOURCE_PRE, patched.patch_hunks),
                         support.KVASER_SOURCE_POST)

    def test_hunk_outside_functions_is_file_level(self):
        post = support.KVASER_SOURCE_PRE.replace("#include <linux/slab.h>", "#include <linux/slab.h>\n#include <linux/string.h>")
        with tempfile.TemporaryDirectory() as tmp:
            bundle = OfflineBundle(support.write_offline_bundle(
                tmp, "CVE-2024-0001", "abc1234", {"drivers/x.c": support.KVASER_SOURCE_PRE}, {"drivers/x.c": post}))
            basic = ingest_basic("CVE-2024-0001", "https://github.com/example/repo/commit/abc1234", bundle)
        self.assertEqual(basic.vulnerable_functions, [])
        self.assertEqual(basic.file_level_hunks, ["drivers/x.c#1"])

    def test_unknown_cve(self):
        with self.assertRaises(CveNotFoundError):
            ingest_basic("CVE-2099-0001", KVASER_URL, self.bundle)
        with self.assertRaises(CveNotFoundError):
            ingest_basic("not-a-cve", KVASER_URL, self.bundle)

    def test_unreachable_commit(self):
        with self.assertRaises(CommitUnreachableError) as ctx:
            ingest_basic(support.KVASER_CVE, f"https://github.com/{support.KVASER_REPO}/commit/fff0000", self.bundle)
        self.assertIn("commit unreachable", str(ctx.exception))
        with self.assertRaises(CommitUnreachableError):
            ingest_basic(support.KVASER_CVE, "https://example.com/not/a/commit", self.bundle)

    def test_parse_commit_url(self):
        self.assertEqual(parse_commit_url("https://gitlab.com/group/proj/-/commit/ABCDEF1"), ("group/proj", "abcdef1"))


def http_response(status_code=200, payload=None, text=""):
    return mock.MagicMock(status_code=status_code, content=text.encode("utf-8"),
                          json=mock.MagicMock(return_value=payload))


class TestLiveSource(unittest.TestCase):
    FULL_SHA = support.KVASER_SHA + "0" * 33
    PARENT_SHA = "1" * 40

    def setUp(self):
        self.source = LiveSource(timeout=5)
        self.source.session = mock.MagicMock()
        self.nvd = {"vulnerabilities": [{"cve": {
            "id": support.KVASER_CVE,
            "descriptions": [{"lang": "en", "value": "kvaser_usb leaks kernel memory"}],
            "weaknesses": [{"description": [{"lang": "en", "value": "CWE-908"}]}],
        }}]}

    def github(self, parents=True):
        commit_url = f"https://api.github.com/repos/{support.KVASER_REPO}/commits/{support.KVASER_SHA}"
        meta = {"sha": self.FULL_SHA, "commit": {"message": "can: kvaser_usb: Fix some info-leaks"},
                "parents": [{"sha": self.PARENT_SHA}] if parents else []}
        diff = render_unified_diff(support.KVASER_SOURCE_PRE, support.KVASER_SOURCE_POST, support.KVASER_FILE)
        raw = {
            self.PARENT_SHA: support.KVASER_SOURCE_PRE,
            self.FULL_SHA: support.KVASER_SOURCE_POST,
        }

        def get(url, timeout=None, headers=None, **kwargs):
            if url == commit_url:
                if headers and headers.get("Accept", "").endswith(".diff"):
                    return http_response(text=diff)
                return http_response(payload=meta)
            for sha, text in raw.items():
                if url == f"https://raw.githubusercontent.com/{support.KVASER_REPO}/{sha}/{support.KVASER_FILE}":
                    return http_response(text=text)
            return http_response(status_code=404)

        self.source.session.get.side_effect = get

    def test_ingest_over_http(self):
        self.github()
        with mock.patch("recurvuln.vkb.requests.get", return_value=http_response(payload=self.nvd)) as nvd_get:
            basic = ingest_basic(support.KVASER_CVE, KVASER_URL, self.source)
        self.assertEqual(nvd_get.call_args.kwargs["params"], {"cveId": support.KVASER_CVE})
        self.assertEqual(basic.cwe_id, "CWE-908")
        (function,) = basic.vulnerable_functions
        self.assertEqual(function.function_name, support.KVASER_FN)
        self.assertIn("kzalloc", function.post_patch_source)

    def test_unknown_cve(self):
        for response in (http_response(status_code=404), http_response(payload={"vulnerabilities": []})):
            with mock.patch("recurvuln.vkb.requests.get", return_value=response):
                with self.assertRaises(CveNotFoundError):
                    self.source.nvd_record("CVE-2099-0001")

    def test_root_commit_is_unreachable(self):
        self.github(parents=False)
        with self.assertRaises(CommitUnreachableError):
            self.source.commit(support.KVASER_REPO, support.KVASER_SHA)


class TestReport(unittest.TestCase):
    def setUp(self):
        self.basic = support.kvaser_record().basic

    def test_headings_in_several_styles(self):
        sections = parse_report_sections(FULL_REPORT)
        self.assertEqual(set(sections), {"vulnerability_description", "cwe_category", "root_cause",
                                         "trigger_chain", "patch_analysis"})
        self.assertEqual(sections["root_cause"], "The buffer comes from kmalloc.")

    def test_report_first_try(self):
        report = generate_report(self.basic, gateway({"report": [{"text": FULL_REPORT}]}))
        self.assertEqual(report.reprompt_count, 0)
        self.assertEqual(report.cwe_category, "CWE-908")

    def test_reprompt_once(self):
        report = generate_report(self.basic, gateway({"report": [{"text": PARTIAL_REPORT}, {"text": FULL_REPORT}]}))
        self.assertEqual(report.reprompt_count, 1)
        self.assertEqual(report.patch_analysis, "kzalloc zeroes the buffer.")

    def test_template_violation(self):
        with self.assertRaises(TemplateViolationError) as ctx:
            generate_report(self.basic, gateway({"report": [{"text": PARTIAL_REPORT}, {"text": PARTIAL_REPORT}]}))
        self.assertIn("template violation", str(ctx.exception))
        self.assertIn("Patch Analysis", str(ctx.exception))


class TestPoints(unittest.TestCase):
    def test_distill(self):
        points = distill_points(support.KVASER_REPORT, gateway({"distill": [{"text": POINTS_TEXT}]}))
        self.assertEqual([p.point_id for p in points], [1, 2, 3])
        self.assertEqual(points[0].symbols_of_interest, ["kvaser_cmd", "kmalloc"])
        self.assertEqual(points[1].symbols_of_interest, ["kvaser_usb_send_cmd"])

    def test_no_points(self):
        with self.assertRaises(DistillationError):
            distill_points(support.KVASER_REPORT, gateway({"distill": [{"text": "  \n"}]}))

    def test_extract_symbols(self):
        self.assertEqual(extract_symbols("call `buf_valid(buf)` on `union foo` and `buf_valid`"), ["buf_valid", "foo"])


class TestBuildRecord(unittest.TestCase):
    def test_end_to_end_offline(self):
        with tempfile.TemporaryDirectory() as tmp:
            bundle = OfflineBundle(support.write_offline_bundle(
                Path(tmp) / "bundle", support.KVASER_CVE, support.KVASER_SHA,
                {support.KVASER_FILE: support.KVASER_SOURCE_PRE}, {support.KVASER_FILE: support.KVASER_SOURCE_POST}))
            provider = ScriptedProvider({"report": [{"text": FULL_REPORT}], "distill": [{"text": POINTS_TEXT}]})
            record = build_record(support.KVASER_CVE, KVASER_URL, bundle,
                                  LLMGateway(ProviderConfig(provider_kind="scripted"), provider))
        self.assertEqual(len(record.points), 3)
        self.assertEqual(provider.opened_labels, [f"report:{support.KVASER_CVE}", f"distill:{support.KVASER_CVE}"])


class TestStore(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.store = VkbStore(Path(self.tmp.name) / "vkb")

    def tearDown(self):
        self.tmp.cleanup()

    def test_round_trip_and_index(self):
        record = support.kvaser_record()
        self.store.store(record)
        loaded = self.store.load(support.KVASER_CVE)
        self.assertEqual(loaded, record)
        index = json.loads((self.store.root / "index.json").read_text())
        self.assertEqual([e["cve_id"] for e in index], [support.KVASER_CVE])
        self.assertEqual(index[0]["functions"], [support.KVASER_FN])

    def test_store_twice_keeps_one_record(self):
        record = support.kvaser_record()
        self.store.store(record)
        updated = record.model_copy(update={"points": [AnalysisPoint(point_id=1, directive="updated")]})
        self.store.store(updated)
        self.assertEqual(self.store.list_records(), [support.KVASER_CVE])
        self.assertEqual(self.store.load(support.KVASER_CVE).points[0].directive, "updated")

    def test_missing_and_corrupt(self):
        with self.assertRaises(RecordNotFoundError):
            self.store.load("CVE-2099-0001")
        self.store.root.mkdir(parents=True)
        (self.store.root / "CVE-2099-0002.json").write_text("{not json", encoding="utf-8")
        with self.assertRaises(RecordParseError):
            self.store.load("CVE-2099-0002")

    def test_load_all(self):
        self.store.store(support.kvaser_record())
        self.store.store(support.ffmpeg_record())
        self.assertEqual([r.cve_id for r in self.store.load_all()], sorted([support.KVASER_CVE, support.FFMPEG_CVE]))
        self.assertIsInstance(self.store.load_all([support.FFMPEG_CVE])[0], VulnRecord)
        self.assertEqual(VkbStore(Path(self.tmp.name) / "absent").list_records(), [])


if __name__ == "__main__":
    unittest.main()

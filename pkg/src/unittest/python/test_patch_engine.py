import tempfile
import unittest
from pathlib import Path

import support

from recurvuln.code_context import RepoIndex, build_index
from recurvuln.config import DetectorConfig
from recurvuln.detector import DetectionMethod, Finding
from recurvuln.errors import PatchApplyError, SpanDriftError
from recurvuln.patch_engine import (
    SandboxWorkspace,
    apply_function_replacement,
    apply_to_origin,
    render_unified_diff,
    rescan_patched,
    splice_function,
    write_patch_file,
)

LEAF_FINDING = Finding(cve_id=support.KVASER_CVE, target_file=support.KVASER_FILE,
                       target_function=support.KVASER_FN, method=DetectionMethod.BOTH, similarity=1.0)


def leaf_function(text=support.KVASER_TARGET_TEXT):
    index = RepoIndex.from_sources("target", {support.KVASER_FILE: text})
    return index.function_named(support.KVASER_FN)[0]


class TestSplice(unittest.TestCase):
    def test_replaces_only_the_function(self):
        patched = splice_function(support.KVASER_TARGET_TEXT, support.KVASER_FILE, leaf_function(),
                                  support.KVASER_POST_FN)
        self.assertEqual(patched, support.KVASER_TARGET_TEXT.replace("kmalloc(", "kzalloc("))

    def test_crlf_files_keep_crlf(self):
        text = support.KVASER_TARGET_TEXT.replace("\n", "\r\n")
        patched = splice_function(text, support.KVASER_FILE, leaf_function(text), support.KVASER_POST_FN)
        self.assertEqual(patched, text.replace("kmalloc(", "kzalloc("))

    def test_span_drift(self):
        moved = "/* new line */\n" + support.KVASER_TARGET_TEXT
        with self.assertRaises(SpanDriftError):
            splice_function(moved, support.KVASER_FILE, leaf_function(), support.KVASER_POST_FN)

    def test_replacement_must_define_the_same_function(self):
        with self.assertRaises(PatchApplyError):
            splice_function(support.KVASER_TARGET_TEXT, support.KVASER_FILE, leaf_function(), support.HYDRA_FIXED_FN)
        with self.assertRaises(PatchApplyError):
            splice_function(support.KVASER_TARGET_TEXT, support.KVASER_FILE, leaf_function(), "int x = ;\n")


class TestSandbox(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.origin = support.write_tree(Path(self.tmp.name) / "target", support.kvaser_target_files())
        self.ws = SandboxWorkspace(self.origin)

    def tearDown(self):
        self.ws.close()
        self.tmp.cleanup()

    def test_origin_is_never_modified(self):
        apply_function_replacement(self.ws, support.KVASER_FILE, leaf_function(), support.KVASER_POST_FN)
        self.assertIn("kzalloc", self.ws.read(support.KVASER_FILE))
        self.assertEqual((self.origin / support.KVASER_FILE).read_text(), support.KVASER_TARGET_TEXT)
        self.assertEqual(len(self.ws.applied), 1)
        self.assertEqual(self.ws.applied[0].replacement_length, support.KVASER_POST_FN.count("\n"))

    def test_diff_and_reset(self):
        apply_function_replacement(self.ws, support.KVASER_FILE, leaf_function(), support.KVASER_POST_FN)
        diff = self.ws.diff(support.KVASER_FILE)
        self.assertIn("-\tcmd = kmalloc(sizeof(*cmd), GFP_KERNEL);", diff)
        self.assertIn("+\tcmd = kzalloc(sizeof(*cmd), GFP_KERNEL);", diff)
        self.ws.reset(support.KVASER_FILE)
        self.assertEqual(self.ws.diff(support.KVASER_FILE), "")
        self.assertEqual(self.ws.applied, [])

    def test_unknown_file(self):
        with self.assertRaises(PatchApplyError):
            self.ws.read("drivers/missing.c")

    def test_rescan(self):
        config = DetectorConfig()
        record = support.kvaser_record()
        self.assertTrue(rescan_patched(self.ws, LEAF_FINDING, config, record).flagged)
        apply_function_replacement(self.ws, support.KVASER_FILE, leaf_function(), support.KVASER_WEAK_FN)
        weak = rescan_patched(self.ws, LEAF_FINDING, config, [record])
        self.assertTrue(weak.flagged)
        self.assertTrue(all(h.target_function == support.KVASER_FN for h in weak.details))


class TestNonUtf8Sources(unittest.TestCase):
    def test_latin1_byte_inside_the_function(self):
        raw = support.KVASER_TARGET_TEXT.replace("\tint rc;\n", "\tint rc; /* r\xe9sultat */\n").encode("latin-1")
        with tempfile.TemporaryDirectory() as tmp:
            origin = Path(tmp) / "target"
            (origin / support.KVASER_FILE).parent.mkdir(parents=True)
            (origin / support.KVASER_FILE).write_bytes(raw)
            fn = build_index(origin, "target").function_named(support.KVASER_FN)[0]
            with SandboxWorkspace(origin) as ws:
                apply_function_replacement(ws, support.KVASER_FILE, fn, fn.body_source.replace("kmalloc(", "kzalloc("))
                diff = ws.diff(support.KVASER_FILE)
            path = write_patch_file(tmp, LEAF_FINDING, diff)
            self.assertIn(b"r\xe9sultat", path.read_bytes())
            self.assertEqual(apply_to_origin(origin, path.read_bytes().decode("utf-8", errors="surrogateescape")),
                             [support.KVASER_FILE])
            self.assertEqual((origin / support.KVASER_FILE).read_bytes(), raw.replace(b"kmalloc(", b"kzalloc("))


class TestOriginPatching(unittest.TestCase):
    def test_write_patch_file(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = write_patch_file(tmp, LEAF_FINDING, "diff text\n")
            self.assertEqual(path, Path(tmp) / "patches" / f"{LEAF_FINDING.slug}.diff")
            self.assertEqual(path.read_text(), "diff text\n")

    def test_apply_multi_file_diff(self):
        with tempfile.TemporaryDirectory() as tmp:
            root = support.write_tree(tmp, support.kvaser_target_files())
            diff = (render_unified_diff(support.HYDRA_FILE_TEXT,
                                        support.HYDRA_FILE_TEXT.replace("kmalloc(", "kzalloc("), support.HYDRA_FILE)
                    + render_unified_diff(support.KVASER_TARGET_TEXT,
                                          support.KVASER_TARGET_TEXT.replace("kmalloc(", "kzalloc("), support.KVASER_FILE))
            self.assertEqual(apply_to_origin(root, diff), sorted([support.HYDRA_FILE, support.KVASER_FILE]))
            self.assertNotIn("kmalloc", (root / support.KVASER_FILE).read_text())
            self.assertNotIn("kmalloc", (root / support.HYDRA_FILE).read_text())

    def test_nothing_written_when_one_file_fails(self):
        with tempfile.TemporaryDirectory() as tmp:
            root = support.write_tree(tmp, support.kvaser_target_files())
            good = render_unified_diff(support.HYDRA_FILE_TEXT,
                                       support.HYDRA_FILE_TEXT.replace("kmalloc(", "kzalloc("), support.HYDRA_FILE)
            stale = render_unified_diff(support.KVASER_SOURCE_PRE, support.KVASER_SOURCE_POST, support.KVASER_FILE)
            with self.assertRaises(PatchApplyError):
                apply_to_origin(root, good + stale)
            self.assertEqual((root / support.HYDRA_FILE).read_text(), support.HYDRA_FILE_TEXT)

    def test_build_index_sees_applied_patch(self):
        with tempfile.TemporaryDirectory() as tmp:
            root = support.write_tree(tmp, support.kvaser_target_files())
            apply_to_origin(root, render_unified_diff(
                support.KVASER_TARGET_TEXT, support.KVASER_TARGET_TEXT.replace("kmalloc(", "kzalloc("),
                support.KVASER_FILE))
            fn = build_index(root, "target").function_named(support.KVASER_FN)[0]
            self.assertIn("kzalloc", fn.body_source)


if __name__ == "__main__":
    unittest.main()

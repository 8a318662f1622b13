import unittest

import support
from hypothesis import given, strategies as st

from recurvuln.diffs import (
    NO_NEWLINE,
    apply_file_patch,
    apply_unified_diff,
    format_file_patch,
    keep_ends,
    parse_unified_diff,
    render_unified_diff,
)
from recurvuln.errors import PatchApplyError

GIT_DIFF = (
    "diff --git a/src/one.c b/src/one.c\n"
    "index 1111111..2222222 100644\n"
    "--- a/src/one.c\n"
    "+++ b/src/one.c\n"
    "@@ -1,3 +1,3 @@\n"
    " int a;\n"
    "-int b;\n"
    "+int b = 0;\n"
    " int c;\n"
    "diff --git a/src/two.c b/src/two.c\n"
    "--- a/src/two.c\n"
    "+++ b/src/two.c\n"
    "@@ -2 +2,2 @@\n"
    " x();\n"
    "+y();\n"
)

LINES = st.lists(st.sampled_from(["int a;", "b = 1;", "", "}", "{", "return a;", "\tc++;"]), max_size=12)


def as_text(lines, trailing_newline):
    text = "\n".join(lines)
    return text + "\n" if lines and trailing_newline else text


class TestParse(unittest.TestCase):
    def test_multi_file_git_diff(self):
        patches = parse_unified_diff(GIT_DIFF)
        self.assertEqual([p.path for p in patches], ["src/one.c", "src/two.c"])
        one = patches[0].hunks[0]
        self.assertEqual(one.removed(), ["int b;"])
        self.assertEqual(one.added(), ["int b = 0;"])
        self.assertEqual(one.old_side(), ["int a;", "int b;", "int c;"])
        self.assertEqual(one.removed_line_numbers(), [2])
        two = patches[1].hunks[0]
        self.assertEqual((two.old_start, two.old_len, two.new_len), (2, 1, 2))
        self.assertEqual(two.added_line_numbers(), [3])
        self.assertEqual(two.old_anchor(), 2)

    def test_kvaser_hunk(self):
        diff = render_unified_diff(support.KVASER_SOURCE_PRE, support.KVASER_SOURCE_POST, support.KVASER_FILE)
        self.assertTrue(diff.startswith(f"--- a/{support.KVASER_FILE}\n+++ b/{support.KVASER_FILE}\n"))
        (patch,) = parse_unified_diff(diff)
        (hunk,) = patch.hunks
        self.assertEqual(hunk.removed_line_numbers(), [16])
        self.assertEqual([line.strip() for line in hunk.added()], ["cmd = kzalloc(sizeof(*cmd), GFP_KERNEL);"])


class TestRenderAndApply(unittest.TestCase):
    def test_equal_texts_render_empty(self):
        self.assertEqual(render_unified_diff("a\n", "a\n"), "")
        self.assertEqual(apply_unified_diff("a\n", ""), "a\n")

    def test_missing_final_newline(self):
        diff = render_unified_diff("a", "a\nb", "f.c")
        self.assertIn(NO_NEWLINE, diff)
        self.assertEqual(apply_unified_diff("a", diff), "a\nb")

    def test_context_mismatch_raises(self):
        diff = render_unified_diff("a\nb\nc\n", "a\nB\nc\n", "f.c")
        with self.assertRaises(PatchApplyError):
            apply_unified_diff("a\nx\nc\n", diff)

    def test_multi_file_diff_rejected_by_single_apply(self):
        with self.assertRaises(PatchApplyError):
            apply_unified_diff("int a;\n", GIT_DIFF)

    def test_format_round_trip(self):
        diff = render_unified_diff(support.FFMPEG_SOURCE_PRE, support.FFMPEG_SOURCE_POST, support.FFMPEG_FILE)
        (patch,) = parse_unified_diff(diff)
        self.assertEqual(apply_unified_diff(support.FFMPEG_SOURCE_PRE, format_file_patch(patch)),
                         support.FFMPEG_SOURCE_POST)

    def test_apply_file_patch_keeps_crlf_lines(self):
        original = "a\r\nb\r\n"
        patched = "a\r\nc\r\n"
        (patch,) = parse_unified_diff(render_unified_diff(original, patched, "f.c"))
        self.assertEqual(apply_file_patch(original, patch), patched)

    def test_keep_ends(self):
        self.assertEqual(keep_ends("a\nb"), ["a\n", "b"])
        self.assertEqual(keep_ends("a\n"), ["a\n"])
        self.assertEqual(keep_ends(""), [])

    @given(LINES, LINES, st.booleans(), st.booleans())
    def test_apply_reproduces_patched_text(self, before, after, before_nl, after_nl):
        original, patched = as_text(before, before_nl), as_text(after, after_nl)
        diff = render_unified_diff(original, patched, "f.c")
        self.assertEqual(apply_unified_diff(original, diff), patched)


if __name__ == "__main__":
    unittest.main()

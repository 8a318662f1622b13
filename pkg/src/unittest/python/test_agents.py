import tempfile
import unittest
from pathlib import Path

import support

from recurvuln.agents import (
    FunctionContexts,
    PatchProposal,
    PortedPointSet,
    analyze,
    called_identifiers,
    check_consistency,
    generate_fix,
    port_points,
    session_label,
    validate,
)
from recurvuln.code_context import RepoIndex, build_index, context_toolbox
from recurvuln.config import DetectorConfig
from recurvuln.detector import DetectionMethod, Finding
from recurvuln.errors import MalformedPatchError, PortingError
from recurvuln.llm_gateway import LLMGateway, ProviderConfig, ScriptedProvider
from recurvuln.patch_engine import SandboxWorkspace
from recurvuln.vkb import AnalysisPoint


def finding_for(cve_id, file_path, function_name):
    return Finding(cve_id=cve_id, target_file=file_path, target_function=function_name,
                   method=DetectionMethod.BOTH, similarity=1.0)


def gateway(scripts, **config):
    provider = ScriptedProvider(scripts)
    return LLMGateway(ProviderConfig(provider_kind="scripted", retry_backoff=0, **config), provider), provider


class KvaserCase(unittest.TestCase):
    def setUp(self):
        self.record = support.kvaser_record()
        self.source_index = RepoIndex.from_sources("source", {support.KVASER_FILE: support.KVASER_SOURCE_PRE})
        self.target_index = RepoIndex.from_sources("target", {
            support.KVASER_FILE: support.KVASER_TARGET_TEXT, support.HYDRA_FILE: support.HYDRA_FILE_TEXT})
        self.toolbox = context_toolbox(self.source_index, self.target_index)
        self.target_fn = self.target_index.function_named(support.KVASER_FN)[0]
        self.finding = finding_for(support.KVASER_CVE, support.KVASER_FILE, support.KVASER_FN)
        self.contexts = FunctionContexts(source_fn=self.source_index.function_named(support.KVASER_FN)[0],
                                         target_fn=self.target_fn)

    def ported(self, directive="The `kvaser_cmd` buffer comes from `kmalloc`", symbols=None):
        point = AnalysisPoint(point_id=1, directive=directive,
                              symbols_of_interest=symbols if symbols is not None else ["kvaser_cmd", "kmalloc"])
        return PortedPointSet(finding_ref=self.finding.slug, points=[point])

    def analyze(self, gw, ported=None, target_fn=None, **kwargs):
        return analyze(self.finding, ported or self.ported(), self.toolbox, gw, record=self.record,
                       target_fn=target_fn or self.target_fn, source_index=self.source_index,
                       target_index=self.target_index, **kwargs)


class TestSessionLabels(unittest.TestCase):
    def test_labels(self):
        finding = finding_for(support.KVASER_CVE, support.KVASER_FILE, support.KVASER_FN)
        base = f"fix:{support.KVASER_CVE}:{support.KVASER_FN}:{finding.file_tag}"
        self.assertEqual(session_label("fix", finding), base)
        self.assertEqual(session_label("fix", finding, 1), base)
        self.assertEqual(session_label("fix", finding, 2), f"{base}:2")
        file_level = finding_for(support.KVASER_CVE, support.KVASER_FILE, "")
        self.assertEqual(session_label("analyze", file_level),
                         f"analyze:{support.KVASER_CVE}:file-level:{file_level.file_tag}")

    def test_same_name_in_two_files(self):
        leaf = finding_for(support.KVASER_CVE, support.KVASER_FILE, "send_cmd")
        hydra = finding_for(support.KVASER_CVE, support.HYDRA_FILE, "send_cmd")
        self.assertNotEqual(session_label("analyze", leaf), session_label("analyze", hydra))
        self.assertNotEqual(leaf.slug, hydra.slug)
        self.assertEqual(leaf.file_tag, finding_for("CVE-2000-0001", support.KVASER_FILE, "other").file_tag)


class TestPorting(KvaserCase):
    def test_ported_dropped_and_notes(self):
        gw, provider = gateway({"port": [{"text": support.PORTED_KVASER}]})
        ported = port_points(self.record, self.finding, self.contexts, gw, self.toolbox)
        self.assertEqual([p.point_id for p in ported.points], [1])
        self.assertEqual(ported.points[0].symbols_of_interest, ["kvaser_cmd", "kmalloc", "kvaser_usb_send_cmd"])
        self.assertEqual(ported.dropped, {2: "covered by point 1 in this code base"})
        self.assertEqual(ported.porting_notes, "the command structure has the same layout in the target")
        self.assertEqual(provider.opened_labels, [session_label("port", self.finding)])

    def test_unaddressed_points_are_dropped(self):
        gw, _ = gateway({"port": [{"text": "PORTED 2: padding of `kvaser_cmd_simple` leaks"}]})
        ported = port_points(self.record, self.finding, self.contexts, gw, self.toolbox)
        self.assertEqual([p.point_id for p in ported.points], [2])
        self.assertEqual(ported.dropped, {1: "not addressed by the porting agent"})

    def test_point_without_symbols_targets_the_function(self):
        gw, _ = gateway({"port": [{"text": "PORTED 1: the buffer is sent uncleared"}]})
        ported = port_points(self.record, self.finding, self.contexts, gw, self.toolbox)
        self.assertEqual(ported.points[0].symbols_of_interest, [support.KVASER_FN])

    def test_nothing_applicable(self):
        gw, _ = gateway({"port": [{"text": "PORTED 7: unknown point\nDROPPED 1: n/a\nDROPPED 2: n/a"}]})
        with self.assertRaises(PortingError):
            port_points(self.record, self.finding, self.contexts, gw, self.toolbox)

    def test_without_knowledge_base_points_are_numbered(self):
        gw, _ = gateway({"port": [{"text": "PORTED 5: first\nPORTED 9: second"}]})
        ported = port_points(self.record, self.finding, self.contexts, gw, None, use_vkb=False)
        self.assertEqual([p.point_id for p in ported.points], [1, 2])

    def test_truncated_session(self):
        gw, _ = gateway({"port": [{"tool": "text_search", "args": {"pattern": "kmalloc"}},
                                  {"tool": "text_search", "args": {"pattern": "kfree"}}]}, max_tool_rounds=1)
        with self.assertRaises(PortingError):
            port_points(self.record, self.finding, self.contexts, gw, self.toolbox)


class TestAnalyze(KvaserCase):
    def test_holds(self):
        gw, _ = gateway({"analyze": [{"tool": "find_struct_in_target", "args": {"name": "kvaser_cmd_simple"}},
                                     {"text": support.KVASER_HOLDS}]})
        verdict = self.analyze(gw)
        self.assertTrue(verdict.is_vulnerable)
        self.assertEqual(verdict.per_point_results[0].outcome, "Holds")
        self.assertEqual(verdict.transcript.tool_names(), ["find_struct_in_target"])
        self.assertIn("MISSING:", verdict.transcript.messages[3].content)

    def test_refuted(self):
        gw, _ = gateway({"analyze": [{"text": support.KVASER_REFUTED}]})
        verdict = self.analyze(gw)
        self.assertFalse(verdict.is_vulnerable)
        self.assertEqual(verdict.per_point_results[0].evidence, "memset clears the whole buffer before it is sent")

    def test_already_patched_target_skips_the_model(self):
        gw, provider = gateway({})
        patched = RepoIndex.from_sources("target", {support.KVASER_FILE: support.KVASER_SOURCE_POST})
        verdict = self.analyze(gw, target_fn=patched.function_named(support.KVASER_FN)[0])
        self.assertFalse(verdict.is_vulnerable)
        self.assertTrue(verdict.shortcut_used)
        self.assertEqual(provider.opened_labels, [])

    def test_identical_helpers_are_left_out_of_the_examination(self):
        gw, provider = gateway({"analyze": [{"text": support.KVASER_REFUTED}]})
        ported = self.ported("`kvaser_usb_leaf_get_busparams` forwards the channel",
                             ["kvaser_usb_leaf_get_busparams"])
        verdict = self.analyze(gw, ported=ported)
        self.assertFalse(verdict.is_vulnerable)
        self.assertTrue(verdict.shortcut_used)
        self.assertEqual(verdict.per_point_results[0].outcome, "Refuted")
        self.assertEqual(len(provider.opened_labels), 1)
        prompt = verdict.transcript.messages[1].content
        self.assertIn("not examined: kvaser_usb_leaf_get_busparams", prompt)
        self.assertNotIn("symbols: kvaser_usb_leaf_get_busparams", prompt)

    def test_identical_helpers_alone_do_not_confirm(self):
        gw, _ = gateway({"analyze": [{"text": "POINT 1: INCONCLUSIVE the channel is not involved"}]})
        ported = self.ported("`kvaser_usb_leaf_get_busparams` forwards the channel",
                             ["kvaser_usb_leaf_get_busparams"])
        verdict = self.analyze(gw, ported=ported)
        self.assertEqual(verdict.per_point_results[0].outcome, "Inconclusive")
        self.assertEqual(verdict.per_point_results[0].evidence, "the channel is not involved")

    def test_round_limit_is_inconclusive(self):
        script = {"analyze": [{"tool": "text_search", "args": {"pattern": "kmalloc"}},
                              {"tool": "text_search", "args": {"pattern": "memset"}}]}
        gw, _ = gateway(script, max_tool_rounds=1)
        verdict = self.analyze(gw)
        self.assertTrue(verdict.inconclusive)
        self.assertFalse(verdict.is_vulnerable)
        gw, _ = gateway(script, max_tool_rounds=1)
        self.assertTrue(self.analyze(gw, inconclusive_is_vulnerable=True).is_vulnerable)

    def test_unreported_point_is_inconclusive(self):
        gw, _ = gateway({"analyze": [{"text": "I could not decide."}]})
        verdict = self.analyze(gw)
        self.assertEqual(verdict.per_point_results[0].outcome, "Inconclusive")
        self.assertTrue(verdict.is_vulnerable)


class TestConsistency(unittest.TestCase):
    def test_missing_function_needs_a_substitute(self):
        source = RepoIndex.from_sources("source", {support.FFMPEG_FILE: support.FFMPEG_SOURCE_PRE,
                                                   "libavutil/log.c": support.FFMPEG_MASTER_LOG})
        target = RepoIndex.from_sources("target", {support.FFMPEG_FILE: support.FFMPEG_SOURCE_PRE,
                                                   "libavcodec/utils.c": support.FFMPEG_RELEASE_UTILS})
        report = check_consistency(support.ffmpeg_record(), target, source)
        self.assertEqual([e.function_name for e in report.entries], [support.FFMPEG_FN, "avpriv_report_missing_feature"])
        self.assertFalse(report.entries[0].needed_by_patch)
        self.assertEqual(report.entries[0].comparison.verdict, "Identical")
        self.assertEqual(report.missing_substitutes(), ["avpriv_report_missing_feature"])
        self.assertIn("avpriv_report_missing_feature: MissingInTarget", report.summary)

    def test_return_type_difference_is_reported(self):
        source = RepoIndex.from_sources("source", {support.VIM_FILE: support.VIM_PRE_FN,
                                                   "src/buffer.c": support.VIM_BUF_VALID})
        target = RepoIndex.from_sources("target", {"src/nvim/insexpand.c": support.VIM_PRE_FN,
                                                   "src/nvim/buffer.c": support.NVIM_BUF_VALID})
        report = check_consistency(support.vim_record(), target, source)
        entry = next(e for e in report.entries if e.function_name == "buf_valid")
        self.assertTrue(entry.needed_by_patch)
        self.assertEqual(entry.comparison.verdict, "SignatureDiff")
        self.assertIn("int in source vs bool in target", entry.comparison.detail)
        self.assertEqual(report.missing_substitutes(), [])

    def test_deterministic_without_a_model(self):
        record = support.kvaser_record()
        source = RepoIndex.from_sources("source", {support.KVASER_FILE: support.KVASER_SOURCE_PRE})
        target = RepoIndex.from_sources("target", {support.KVASER_FILE: support.KVASER_TARGET_TEXT})
        first = check_consistency(record, target, source)
        self.assertEqual(first, check_consistency(record, target, source))
        self.assertEqual([e.function_name for e in first.entries], [support.KVASER_FN, "kzalloc"])

    def test_model_written_summary(self):
        record = support.kvaser_record()
        source = RepoIndex.from_sources("source", {support.KVASER_FILE: support.KVASER_SOURCE_PRE})
        target = RepoIndex.from_sources("target", {support.KVASER_FILE: support.KVASER_TARGET_TEXT})
        gw, provider = gateway({"consistency": [{"text": "kzalloc is a kernel allocator available everywhere."}]})
        report = check_consistency(record, target, source, gw)
        self.assertEqual(report.summary, "kzalloc is a kernel allocator available everywhere.")
        self.assertEqual(provider.opened_labels, [f"consistency:{support.KVASER_CVE}"])

    def test_called_identifiers(self):
        patch = support.ffmpeg_record().basic.patch_text()
        self.assertEqual(called_identifiers(patch), ["avpriv_report_missing_feature"])


class TestFix(KvaserCase):
    def fix(self, gw, consistency=None, **kwargs):
        consistency = consistency or check_consistency(self.record, self.target_index, self.source_index)
        return generate_fix(self.finding, None, self.record, consistency, self.toolbox, gw,
                            target_fn=self.target_fn, file_text=support.KVASER_TARGET_TEXT, **kwargs)

    def test_proposal(self):
        gw, _ = gateway({"fix": [{"text": support.KVASER_FIX_REPLY}]})
        proposal = self.fix(gw)
        self.assertEqual(proposal.function_name, support.KVASER_FN)
        self.assertEqual(proposal.patched_function_source, support.KVASER_POST_FN.rstrip("\n"))
        self.assertIn("-\tcmd = kmalloc(sizeof(*cmd), GFP_KERNEL);", proposal.unified_diff)
        self.assertIn("+\tcmd = kzalloc(sizeof(*cmd), GFP_KERNEL);", proposal.unified_diff)
        self.assertEqual(proposal.rationale, "kzalloc clears the padding before the command is sent")

    def test_reprompt_after_unusable_output(self):
        gw, provider = gateway({"fix": [{"text": "Use kzalloc."}, {"text": support.KVASER_FIX_REPLY}]})
        self.assertIn("kzalloc", self.fix(gw).patched_function_source)
        self.assertEqual(provider.count_opened("fix"), 1)

    def test_malformed_twice(self):
        gw, _ = gateway({"fix": [{"text": "Use kzalloc."}, {"text": support.HYDRA_FIX_REPLY}]})
        with self.assertRaises(MalformedPatchError):
            self.fix(gw)

    def test_round_number_in_label(self):
        gw, provider = gateway({"fix": [{"text": support.KVASER_FIX_REPLY}]})
        self.fix(gw, feedback="still flagged", round_no=2)
        self.assertEqual(provider.opened_labels, [f"{session_label('fix', self.finding)}:2"])

    def test_substitution_for_missing_function(self):
        source = RepoIndex.from_sources("source", {support.FFMPEG_FILE: support.FFMPEG_SOURCE_PRE,
                                                   "libavutil/log.c": support.FFMPEG_MASTER_LOG})
        target = RepoIndex.from_sources("target", {support.FFMPEG_FILE: support.FFMPEG_SOURCE_PRE,
                                                   "libavcodec/utils.c": support.FFMPEG_RELEASE_UTILS})
        record = support.ffmpeg_record()
        consistency = check_consistency(record, target, source)
        target_fn = target.function_named(support.FFMPEG_FN)[0]
        finding = finding_for(support.FFMPEG_CVE, support.FFMPEG_FILE, support.FFMPEG_FN)
        gw, _ = gateway({"fix": [{"text": support.FFMPEG_FIX_REPLY}]})
        proposal = generate_fix(finding, None, record, consistency, context_toolbox(source, target), gw,
                                target_fn=target_fn, file_text=support.FFMPEG_SOURCE_PRE)
        self.assertEqual([(s.missing_symbol, s.substitute_symbol) for s in proposal.substitutions],
                         [("avpriv_report_missing_feature", "av_log_missing_feature")])
        self.assertIn("av_log_missing_feature", proposal.unified_diff)
        self.assertNotIn("avpriv_report_missing_feature", proposal.unified_diff)


class TestValidate(KvaserCase):
    def setUp(self):
        super().setUp()
        self.tmp = tempfile.TemporaryDirectory()
        self.root = support.write_tree(Path(self.tmp.name) / "target", {
            support.KVASER_FILE: support.KVASER_TARGET_TEXT, support.HYDRA_FILE: support.HYDRA_FILE_TEXT})
        self.ws = SandboxWorkspace(self.root)
        self.target_fn = build_index(self.root, "target").function_named(support.KVASER_FN)[0]

    def tearDown(self):
        self.ws.close()
        self.tmp.cleanup()

    def proposal(self, source):
        return PatchProposal(finding_ref=self.finding.slug, file_path=support.KVASER_FILE,
                             function_name=support.KVASER_FN, patched_function_source=source.rstrip("\n"),
                             unified_diff="")

    def validate(self, gw, source, round_no=1):
        return validate(self.proposal(source), self.record, self.ported(), self.finding, DetectorConfig(),
                        self.ws, self.toolbox, gw, target_fn=self.target_fn, source_index=self.source_index,
                        target_index=self.target_index, round_no=round_no)

    def test_still_flagged_and_still_vulnerable(self):
        gw, provider = gateway({"validate": [{"text": support.VALIDATE_HOLDS}]})
        result = self.validate(gw, support.KVASER_WEAK_FN, round_no=2)
        self.assertFalse(result.fixed)
        self.assertTrue(result.detector_flagged)
        self.assertIn("still flagged", result.feedback)
        self.assertEqual(provider.opened_labels, [f"{session_label('validate', self.finding)}:2"])
        self.assertEqual((self.root / support.KVASER_FILE).read_text(), support.KVASER_TARGET_TEXT)

    def test_still_flagged_but_refuted(self):
        gw, _ = gateway({"validate": [{"text": support.VALIDATE_REFUTED}]})
        result = self.validate(gw, support.KVASER_WEAK_FN)
        self.assertTrue(result.fixed)
        self.assertTrue(result.detector_flagged)
        self.assertEqual(result.feedback, "")

    def test_point_on_identical_helper_still_reaches_the_agent(self):
        gw, provider = gateway({"validate": [{"text": support.VALIDATE_REFUTED}]})
        ported = self.ported("`kvaser_usb_leaf_get_busparams` forwards the channel",
                             ["kvaser_usb_leaf_get_busparams"])
        result = validate(self.proposal(support.KVASER_WEAK_FN), self.record, ported, self.finding,
                          DetectorConfig(), self.ws, self.toolbox, gw, target_fn=self.target_fn,
                          source_index=self.source_index, target_index=self.target_index)
        self.assertTrue(result.detector_flagged)
        self.assertTrue(result.fixed)
        self.assertEqual(result.agent_verdict.per_point_results[0].outcome, "Refuted")
        self.assertEqual(provider.count_opened("validate"), 1)

    def test_historical_fix_is_accepted(self):
        gw, provider = gateway({})
        result = self.validate(gw, support.KVASER_POST_FN)
        self.assertTrue(result.fixed)
        self.assertEqual(provider.opened_labels, [])

    def test_detector_clean_skips_the_agent(self):
        with tempfile.TemporaryDirectory() as tmp:
            root = support.write_tree(tmp, {support.FFMPEG_FILE: support.FFMPEG_SOURCE_PRE})
            index = build_index(root, "target")
            target_fn = index.function_named(support.FFMPEG_FN)[0]
            finding = finding_for(support.FFMPEG_CVE, support.FFMPEG_FILE, support.FFMPEG_FN)
            proposal = PatchProposal(finding_ref=finding.slug, file_path=support.FFMPEG_FILE,
                                     function_name=support.FFMPEG_FN,
                                     patched_function_source=support.FFMPEG_TARGET_FIX.rstrip("\n"), unified_diff="")
            point = AnalysisPoint(point_id=1, directive="channels unchecked")
            gw, provider = gateway({})
            with SandboxWorkspace(root) as ws:
                result = validate(proposal, support.ffmpeg_record(),
                                  PortedPointSet(finding_ref=finding.slug, points=[point]), finding,
                                  DetectorConfig(), ws, {}, gw, target_fn=target_fn, source_index=index,
                                  target_index=index)
        self.assertTrue(result.fixed)
        self.assertFalse(result.detector_flagged)
        self.assertEqual(provider.count_opened("validate"), 0)


if __name__ == "__main__":
    unittest.main()

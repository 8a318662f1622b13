"""
Shared fixtures for the unit tests: C sources, record builders, fixture repositories
and scripted provider scripts.
"""
import json
import os
import random
import sys
from pathlib import Path
from typing import Dict, List, Optional

# Set test mode
os.environ["TEST_MODE"] = "true"

# Add main python directory to path
project_root = os.path.abspath(os.path.join(os.path.dirname(__file__), "../../.."))
main_python_dir = os.path.join(project_root, "src", "main", "python")
if main_python_dir not in sys.path:
    sys.path.insert(0, main_python_dir)

from recurvuln.code_context import parse_definitions  # noqa: E402
from recurvuln.diffs import render_unified_diff  # noqa: E402
from recurvuln.vkb import (  # noqa: E402
    AnalysisPoint,
    AnalysisReport,
    PatchedFile,
    VulnBasicInfo,
    VulnerableFunction,
    VulnRecord,
)

# -- kvaser: uninitialized padding sent to the device ---------------------

KVASER_CVE = "CVE-2019-19947"
KVASER_REPO = "torvalds/linux"
KVASER_SHA = "da2311a"
KVASER_FILE = "drivers/net/can/usb/kvaser_usb/kvaser_usb_leaf.c"
HYDRA_FILE = "drivers/net/can/usb/kvaser_usb/kvaser_usb_hydra.c"
KVASER_FN = "kvaser_usb_leaf_send_simple_cmd"
HYDRA_FN = "kvaser_usb_hydra_send_simple_cmd"

KVASER_PRE_FN = (
    "static int kvaser_usb_leaf_send_simple_cmd(const struct kvaser_usb *dev,\n"
    "\t\t\t\t\t   u8 cmd_id, int channel)\n"
    "{\n"
    "\tstruct kvaser_cmd *cmd;\n"
    "\tint rc;\n"
    "\n"
    "\tcmd = kmalloc(sizeof(*cmd), GFP_KERNEL);\n"
    "\tif (!cmd)\n"
    "\t\treturn -ENOMEM;\n"
    "\n"
    "\tcmd->id = cmd_id;\n"
    "\tcmd->len = CMD_HEADER_LEN + sizeof(struct kvaser_cmd_simple);\n"
    "\tcmd->u.simple.channel = channel;\n"
    "\tcmd->u.simple.tid = 0xff;\n"
    "\n"
    "\trc = kvaser_usb_send_cmd(dev, cmd, cmd->len);\n"
    "\n"
    "\tkfree(cmd);\n"
    "\treturn rc;\n"
    "}\n"
)
KVASER_POST_FN = KVASER_PRE_FN.replace("kmalloc(", "kzalloc(")

# patch that leaves the allocation alone; the clone detector keeps flagging it
KVASER_WEAK_FN = KVASER_PRE_FN.replace("\treturn rc;\n", "\treturn rc ? rc : 0;\n")

KVASER_GET_BUSPARAMS = (
    "static int kvaser_usb_leaf_get_busparams(struct kvaser_usb_net_priv *priv)\n"
    "{\n"
    "\treturn kvaser_usb_leaf_send_simple_cmd(priv->dev, CMD_GET_BUS_PARAMS,\n"
    "\t\t\t\t\t       priv->channel);\n"
    "}\n"
)

KVASER_HEADER = (
    "// SPDX-License-Identifier: GPL-2.0\n"
    "#include <linux/slab.h>\n"
    "#include \"kvaser_usb.h\"\n"
    "\n"
    "struct kvaser_cmd_simple {\n"
    "\tu8 tid;\n"
    "\tu8 channel;\n"
    "};\n"
    "\n"
)

KVASER_SOURCE_PRE = KVASER_HEADER + KVASER_PRE_FN + "\n" + KVASER_GET_BUSPARAMS
KVASER_SOURCE_POST = KVASER_HEADER + KVASER_POST_FN + "\n" + KVASER_GET_BUSPARAMS

# similar-but-patched twin: same allocation, but the buffer is cleared before use
HYDRA_SBP_FN = (
    "static int kvaser_usb_hydra_send_simple_cmd(struct kvaser_usb *dev,\n"
    "\t\t\t\t\t    u8 cmd_no, int channel)\n"
    "{\n"
    "\tstruct kvaser_cmd *cmd;\n"
    "\tint rc;\n"
    "\n"
    "\tcmd = kmalloc(sizeof(*cmd), GFP_KERNEL);\n"
    "\tif (!cmd)\n"
    "\t\treturn -ENOMEM;\n"
    "\n"
    "\tmemset(cmd, 0, sizeof(*cmd));\n"
    "\tcmd->header.cmd_no = cmd_no;\n"
    "\trc = kvaser_usb_send_cmd(dev, cmd, sizeof(*cmd));\n"
    "\n"
    "\tkfree(cmd);\n"
    "\treturn rc;\n"
    "}\n"
)
HYDRA_FIXED_FN = HYDRA_SBP_FN.replace("kmalloc(", "kzalloc(")

HYDRA_FILE_TEXT = (
    "// SPDX-License-Identifier: GPL-2.0\n"
    "#include <linux/slab.h>\n"
    "\n"
    + HYDRA_SBP_FN
)

# the target fork keeps the vulnerable function untouched
KVASER_TARGET_TEXT = (
    "// SPDX-License-Identifier: GPL-2.0\n"
    "/* Fork of the Kvaser leaf driver */\n"
    "#include <linux/slab.h>\n"
    "#include \"kvaser_usb.h\"\n"
    "\n"
    + KVASER_PRE_FN
    + "\n"
    + KVASER_GET_BUSPARAMS
)

KVASER_REPORT = AnalysisReport(
    vulnerability_description="Kernel heap memory is disclosed to a USB device through uninitialized padding.",
    cwe_category="CWE-908: Use of Uninitialized Resource",
    root_cause="The command buffer is allocated with kmalloc and only some of its fields are written.",
    trigger_chain="A simple command is built and sent in full with kvaser_usb_send_cmd.",
    patch_analysis="The allocation is switched to kzalloc so every byte is zeroed.",
)

KVASER_POINTS = [
    AnalysisPoint(point_id=1, directive="The `kvaser_cmd` buffer is allocated with `kmalloc` and sent whole by "
                                        "`kvaser_usb_send_cmd` without clearing it",
                  symbols_of_interest=["kvaser_cmd", "kmalloc", "kvaser_usb_send_cmd"]),
    AnalysisPoint(point_id=2, directive="Padding bytes of `kvaser_cmd_simple` reach the device uninitialized",
                  symbols_of_interest=["kvaser_cmd_simple"]),
]

PORTED_KVASER = (
    "PORTED 1: The `kvaser_cmd` buffer is allocated with `kmalloc` and sent whole by `kvaser_usb_send_cmd`\n"
    "DROPPED 2: covered by point 1 in this code base\n"
    "NOTES: the command structure has the same layout in the target"
)
KVASER_HOLDS = "POINT 1: HOLDS the buffer comes from kmalloc and is never cleared"
KVASER_REFUTED = "POINT 1: REFUTED memset clears the whole buffer before it is sent"
KVASER_FIX_REPLY = (
    "Allocate the command zeroed.\n"
    "```c\n" + KVASER_POST_FN + "```\n"
    "RATIONALE: kzalloc clears the padding before the command is sent"
)
KVASER_WEAK_FIX_REPLY = "```c\n" + KVASER_WEAK_FN + "```\nRATIONALE: tidy the return value"
HYDRA_FIX_REPLY = "```c\n" + HYDRA_FIXED_FN + "```\nRATIONALE: allocate zeroed memory"
VALIDATE_REFUTED = "POINT 1: REFUTED kzalloc zeroes the buffer"
VALIDATE_HOLDS = "POINT 1: HOLDS the buffer is still allocated with kmalloc"

# -- ffmpeg: the fix calls a function the release branch does not have ----

FFMPEG_CVE = "CVE-2013-0845"
FFMPEG_FILE = "libavcodec/mpc8.c"
FFMPEG_FN = "mpc8_decode_init"

FFMPEG_PRE_FN = (
    "static int mpc8_decode_init(AVCodecContext *avctx, int channels)\n"
    "{\n"
    "\tif (channels > 2)\n"
    "\t\treturn AVERROR_INVALIDDATA;\n"
    "\tavctx->channels = channels;\n"
    "\treturn 0;\n"
    "}\n"
)
FFMPEG_POST_FN = (
    "static int mpc8_decode_init(AVCodecContext *avctx, int channels)\n"
    "{\n"
    "\tif (channels > 2) {\n"
    "\t\tavpriv_report_missing_feature(avctx, \"%d channels\", channels);\n"
    "\t\treturn AVERROR_PATCHWELCOME;\n"
    "\t}\n"
    "\tavctx->channels = channels;\n"
    "\treturn 0;\n"
    "}\n"
)
FFMPEG_TARGET_FIX = (
    "static int mpc8_decode_init(AVCodecContext *avctx, int channels)\n"
    "{\n"
    "\tif (channels > 2) {\n"
    "\t\tav_log_missing_feature(avctx, \"multichannel\", 0);\n"
    "\t\treturn AVERROR_PATCHWELCOME;\n"
    "\t}\n"
    "\tavctx->channels = channels;\n"
    "\treturn 0;\n"
    "}\n"
)
FFMPEG_HEADER = "#include \"avcodec.h\"\n\n"
FFMPEG_SOURCE_PRE = FFMPEG_HEADER + FFMPEG_PRE_FN
FFMPEG_SOURCE_POST = FFMPEG_HEADER + FFMPEG_POST_FN

FFMPEG_MASTER_LOG = (
    "void avpriv_report_missing_feature(void *avc, const char *msg, ...)\n"
    "{\n"
    "\tva_list argument_list;\n"
    "\n"
    "\tva_start(argument_list, msg);\n"
    "\tmissing_feature_sample(0, avc, msg, argument_list);\n"
    "\tva_end(argument_list);\n"
    "}\n"
)
FFMPEG_RELEASE_UTILS = (
    "void av_log_missing_feature(void *avc, const char *feature, int want_sample)\n"
    "{\n"
    "\tav_log(avc, AV_LOG_WARNING, \"%s is not implemented.\\n\", feature);\n"
    "}\n"
)
FFMPEG_FIX_REPLY = (
    "```c\n" + FFMPEG_TARGET_FIX + "```\n"
    "SUBSTITUTE: avpriv_report_missing_feature -> av_log_missing_feature\n"
    "RATIONALE: the release branch reports missing features with av_log_missing_feature"
)

# -- vim / neovim: same helper, different return type ---------------------

VIM_CVE = "CVE-2022-2124"
VIM_FILE = "src/insexpand.c"
VIM_FN = "ins_compl_get_exp"

VIM_PRE_FN = (
    "static int ins_compl_get_exp(pos_T *ini)\n"
    "{\n"
    "\tbuf_T *buf = ins_buf;\n"
    "\n"
    "\tif (buf->b_p_inf)\n"
    "\t\treturn FAIL;\n"
    "\treturn OK;\n"
    "}\n"
)
VIM_POST_FN = (
    "static int ins_compl_get_exp(pos_T *ini)\n"
    "{\n"
    "\tbuf_T *buf = ins_buf;\n"
    "\n"
    "\tif (!buf_valid(buf))\n"
    "\t\treturn FAIL;\n"
    "\tif (buf->b_p_inf)\n"
    "\t\treturn FAIL;\n"
    "\treturn OK;\n"
    "}\n"
)
VIM_BUF_VALID = (
    "int buf_valid(buf_T *buf)\n"
    "{\n"
    "\tbuf_T *bp;\n"
    "\n"
    "\tfor (bp = lastbuf; bp != NULL; bp = bp->b_prev)\n"
    "\t\tif (bp == buf)\n"
    "\t\t\treturn TRUE;\n"
    "\treturn FALSE;\n"
    "}\n"
)
NVIM_BUF_VALID = (
    "bool buf_valid(buf_T *buf)\n"
    "{\n"
    "\tif (buf == NULL)\n"
    "\t\treturn false;\n"
    "\tfor (buf_T *bp = lastbuf; bp != NULL; bp = bp->b_prev)\n"
    "\t\tif (bp == buf)\n"
    "\t\t\treturn true;\n"
    "\treturn false;\n"
    "}\n"
)


# -- builders -------------------------------------------------------------


def default_report(description: str = "Fixture vulnerability") -> AnalysisReport:
    return AnalysisReport(
        vulnerability_description=description,
        cwe_category="CWE-20: Improper Input Validation",
        root_cause="Input is used before it is checked.",
        trigger_chain="Crafted input reaches the unchecked path.",
        patch_analysis="The patch adds the missing check.",
    )


def record_from_files(cve_id: str, repo_name: str, file_path: str, pre_text: str, post_text: str,
                      points: Optional[List[AnalysisPoint]] = None, report: Optional[AnalysisReport] = None,
                      description: str = "Fixture vulnerability", sha: str = "abcdef1") -> VulnRecord:
    """A record for a single-file fix; vulnerable functions are those whose bodies changed."""
    before, _, _ = parse_definitions(pre_text, file_path)
    after = {fn.name: fn for fn in parse_definitions(post_text, file_path)[0]}
    functions = [
        VulnerableFunction(file_path=file_path, function_name=fn.name, pre_patch_source=fn.body_source,
                           post_patch_source=after[fn.name].body_source)
        for fn in before if fn.name in after and after[fn.name].body_source != fn.body_source
    ]
    basic = VulnBasicInfo(
        cve_id=cve_id,
        cwe_id="CWE-20",
        description=description,
        repo_name=repo_name,
        commit_url=f"https://github.com/{repo_name}/commit/{sha}",
        commit_message="Fix the vulnerability",
        patched_files=[PatchedFile(file_path=file_path,
                                   patch_hunks=render_unified_diff(pre_text, post_text, file_path))],
        vulnerable_functions=functions,
    )
    if points is None:
        points = [AnalysisPoint(point_id=1, directive=f"The input check fixed by {cve_id} is missing")]
    return VulnRecord(basic=basic, report=report or default_report(description), points=points)


def kvaser_record() -> VulnRecord:
    return record_from_files(KVASER_CVE, KVASER_REPO, KVASER_FILE, KVASER_SOURCE_PRE, KVASER_SOURCE_POST,
                             points=list(KVASER_POINTS), report=KVASER_REPORT, sha=KVASER_SHA,
                             description="kvaser_usb leaks kernel memory through uninitialized padding")


def ffmpeg_record() -> VulnRecord:
    return record_from_files(FFMPEG_CVE, "FFmpeg/FFmpeg", FFMPEG_FILE, FFMPEG_SOURCE_PRE, FFMPEG_SOURCE_POST,
                             points=[AnalysisPoint(point_id=1, directive="`mpc8_decode_init` accepts more "
                                                                         "channels than it supports",
                                                   symbols_of_interest=["mpc8_decode_init"])])


def vim_record() -> VulnRecord:
    return record_from_files(VIM_CVE, "vim/vim", VIM_FILE, VIM_PRE_FN, VIM_POST_FN,
                             points=[AnalysisPoint(point_id=1, directive="The completion buffer is used "
                                                                         "without `buf_valid` checking it",
                                                   symbols_of_interest=["buf_valid"])])


def write_tree(root, files: Dict[str, str]) -> Path:
    root = Path(root)
    for rel, text in files.items():
        path = root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(text.encode("utf-8"))
    return root


def kvaser_target_files() -> Dict[str, str]:
    """One planted recurrence and one similar-but-patched twin."""
    return {KVASER_FILE: KVASER_TARGET_TEXT, HYDRA_FILE: HYDRA_FILE_TEXT, "README": "not C\n"}


def kvaser_scripts() -> Dict[str, list]:
    return {
        "port": [{"text": PORTED_KVASER}],
        f"analyze:{KVASER_CVE}:{KVASER_FN}": [
            {"tool": "find_struct_in_target", "args": {"name": "kvaser_cmd_simple"}},
            {"text": KVASER_HOLDS},
        ],
        f"analyze:{KVASER_CVE}:{HYDRA_FN}": [
            {"tool": "find_function_in_target", "args": {"name": HYDRA_FN}},
            {"text": KVASER_REFUTED},
        ],
        "fix": [{"text": KVASER_FIX_REPLY}],
        f"fix:{KVASER_CVE}:{HYDRA_FN}": [{"text": HYDRA_FIX_REPLY}],
        "validate": [{"text": VALIDATE_REFUTED}],
    }


def write_script(path, scripts) -> Path:
    path = Path(path)
    path.write_text(json.dumps(scripts, indent=2), encoding="utf-8")
    return path


def write_offline_bundle(root, cve_id: str, sha: str, before: Dict[str, str], after: Dict[str, str],
                         description: str = "Fixture vulnerability", cwes=("CWE-908",),
                         message: str = "Fix the vulnerability") -> Path:
    """Lay out an offline NVD + commit bundle for ``ingest_basic``."""
    root = Path(root)
    nvd = {"vulnerabilities": [{"cve": {
        "id": cve_id,
        "descriptions": [{"lang": "en", "value": description}],
        "weaknesses": [{"description": [{"lang": "en", "value": cwe} for cwe in cwes]}],
    }}]}
    write_tree(root, {f"nvd/{cve_id}.json": json.dumps(nvd)})
    commit_dir = root / "commits" / sha
    diff = "".join(render_unified_diff(before[path], after[path], path) for path in sorted(before))
    write_tree(commit_dir, {"commit.json": json.dumps({"message": message}), "diff.patch": diff})
    write_tree(commit_dir / "parent", before)
    write_tree(commit_dir / "child", after)
    return root


# -- random fixture repositories ------------------------------------------

STATEMENTS = [
    "a = a + 1;", "a -= 2;", "a = helper(a);", "a ^= 5;", "buf[a] = 0;", "a = a * 3;",
    "total += a;", "a = clamp(a, 0, 9);", "if (a > limit) a = limit;", "count++;",
]


def random_function(rng: random.Random, name: str, length: int) -> str:
    body = "".join(f"\t{rng.choice(STATEMENTS)}\n" for _ in range(length))
    return f"int {name}(int a)\n{{\n{body}\treturn a;\n}}\n"


def mutate_function(rng: random.Random, source: str) -> str:
    """Replace one statement line of a generated function."""
    lines = source.split("\n")
    body = [i for i, line in enumerate(lines) if line.startswith("\t") and not line.startswith("\treturn")]
    i = rng.choice(body)
    lines[i] = "\t" + rng.choice([s for s in STATEMENTS if "\t" + s != lines[i]])
    return "\n".join(lines)


def random_repo(rng: random.Random, planted: List[str], max_files: int = 12) -> Dict[str, str]:
    """Files of generated functions, with ``planted`` functions (or mutations) spread among them."""
    files: Dict[str, str] = {}
    for k in range(rng.randint(3, max_files)):
        parts = [random_function(rng, f"fn_{k}_{j}", rng.randint(4, 12)) for j in range(rng.randint(1, 4))]
        files[f"src/mod_{k}.c"] = "\n".join(parts)
    paths = sorted(files)
    for source in planted:
        path = rng.choice(paths)
        variant = source if rng.random() < 0.5 else mutate_function(rng, source)
        files[path] = files[path] + "\n" + variant
    return files


def random_record(rng: random.Random, cve_id: str) -> VulnRecord:
    """A record whose fix deletes one statement from a generated function."""
    pre = random_function(rng, f"vuln_{cve_id[-4:]}", rng.randint(6, 12))
    lines = pre.split("\n")
    body = [i for i, line in enumerate(lines) if line.startswith("\t") and not line.startswith("\treturn")]
    victim = rng.choice(body)
    post = "\n".join(lines[:victim] + ["\tif (a < 0) return 0;"] + lines[victim + 1:])
    path = "src/vuln.c"
    return record_from_files(cve_id, "example/upstream", path, pre, post)

#!/usr/bin/env python3
"""Generate C interposition wrappers from an interface spec document.

Reads the monitor's JSON interface format directly (that format is the
contract; no other coupling).  One wrapper per declared non-callback
function: resolve the real symbol lazily, emit a CallEntry, apply the
monitor's command, invoke (or skip) the real function, emit a CallExit.

Supported parameter shapes: integer scalars, pointers (text strings and
fixed-size pointees get shared-region snapshots; unknown-size pointees are
registered without bytes), bare function references.  Anything else is
rejected with UnsupportedSignature, as are variadic functions and pointee
aggregates that themselves contain pointers (the shim only mirrors one
level of the region walk).
"""

import argparse
import json
import sys

ARG_SCALAR = 0
ARG_PTR_FIXED = 1
ARG_PTR_TEXT = 2
ARG_PTR_OPAQUE = 3

INT_TYPES = {8: "int8_t", 16: "int16_t", 32: "int32_t", 64: "int64_t"}
UINT_TYPES = {8: "uint8_t", 16: "uint16_t", 32: "uint32_t", 64: "uint64_t"}


class UnsupportedSignature(Exception):
    pass


def c_type(desc, symbol):
    kind = desc["kind"]
    if kind == "Integer":
        table = INT_TYPES if desc.get("signed") else UINT_TYPES
        if desc["size_bits"] not in table:
            raise UnsupportedSignature(f"{symbol}: {desc['size_bits']}-bit integer")
        return table[desc["size_bits"]]
    if kind in ("AddressValue", "CallableRef"):
        return "void *"
    raise UnsupportedSignature(f"{symbol}: by-value {kind} parameter")


def classify_arg(desc, symbol):
    kind = desc["kind"]
    if kind == "Integer":
        return ARG_SCALAR, desc["size_bits"] // 8, 0
    if kind == "CallableRef":
        return ARG_SCALAR, 8, 0
    if kind == "AddressValue":
        pointee = desc.get("pointee")
        if pointee is None:
            return ARG_PTR_OPAQUE, 8, 0
        pk = pointee["kind"]
        if pk == "TextString":
            return ARG_PTR_TEXT, 8, 0
        if pk in ("RawBuffer",):
            return ARG_PTR_OPAQUE, 8, 0
        if pk == "Aggregate":
            for f in pointee.get("fields", []):
                if f["type"]["kind"] in ("AddressValue", "CallableRef"):
                    raise UnsupportedSignature(
                        f"{symbol}: pointee aggregate with pointer field {f['name']!r}"
                    )
        return ARG_PTR_FIXED, 8, pointee["size_bits"] // 8
    raise UnsupportedSignature(f"{symbol}: by-value {kind} parameter")


def generate(doc):
    lines = [
        "/* generated by gen_wrappers.py; do not edit */",
        "#define _GNU_SOURCE",
        '#include "shim_runtime.h"',
        "#include <dlfcn.h>",
        "#include <stdint.h>",
        "",
    ]
    for fn in doc["functions"]:
        if fn.get("is_callback"):
            continue
        symbol = fn["symbol"]
        if fn.get("variadic"):
            raise UnsupportedSignature(f"{symbol}: variadic")
        params = fn["params"]
        classes, widths, pointees, ctypes = [], [], [], []
        for p in params:
            cls, width, plen = classify_arg(p["type"], symbol)
            classes.append(cls)
            widths.append(width)
            pointees.append(plen)
            ctypes.append(c_type(p["type"], symbol))
        ret = fn.get("return_type")
        ret_ctype = "void" if ret is None else c_type(ret, symbol)
        ret_width = 0 if ret is None else (8 if ret["kind"] != "Integer" else ret["size_bits"] // 8)

        n = len(params)
        arr = lambda vals: "{" + ", ".join(str(v) for v in vals) + "}" if vals else "{0}"
        lines += [
            f"static const uint8_t {symbol}_class[] = {arr(classes)};",
            f"static const uint8_t {symbol}_width[] = {arr(widths)};",
            f"static const uint32_t {symbol}_plen[] = {arr(pointees)};",
            f"static const civ_sig_t {symbol}_sig = {{",
            f'    "{symbol}", {n}, {symbol}_class, {symbol}_width, {symbol}_plen,',
            f"    {0 if ret is None else 1}, {ret_width}",
            "};",
        ]

        arglist = ", ".join(f"{t}a{i}" if t.endswith("*") else f"{t} a{i}"
                            for i, t in enumerate(ctypes)) or "void"
        callargs_real = ", ".join(
            f"({t})(uintptr_t)args[{i}]" if t.endswith("*") else f"({t})args[{i}]"
            for i, t in enumerate(ctypes)
        )
        fnptr = f"{ret_ctype} (*)({', '.join(ctypes) or 'void'})"
        lines += [
            f"{ret_ctype} {symbol}({arglist}) {{",
            f"    static {ret_ctype} (*real)({', '.join(ctypes) or 'void'});",
            f'    if (!real) real = ({fnptr})(uintptr_t)dlsym(RTLD_NEXT, "{symbol}");',
        ]
        pack = "".join(
            f"(uint64_t)(uintptr_t)a{i}, " if ctypes[i].endswith("*") else f"(uint64_t)a{i}, "
            for i in range(n)
        )
        direct = f"real({', '.join(f'a{i}' for i in range(n))})"
        if ret is None:
            lines += [
                "    if (!civ_enter()) {",
                f"        {direct};",
                "        civ_leave();",
                "        return;",
                "    }",
                f"    uint64_t args[] = {{{pack}0}};",
                "    uint64_t synth = 0;",
                f"    if (civ_call_entry(&{symbol}_sig, args, &synth)) {{",
                f"        real({callargs_real or ''});",
                f"        civ_call_exit(&{symbol}_sig, 0);",
                "    }",
                "    civ_leave();",
                "}",
                "",
            ]
        else:
            lines += [
                "    if (!civ_enter()) {",
                f"        {ret_ctype} direct = {direct};",
                "        civ_leave();",
                "        return direct;",
                "    }",
                f"    uint64_t args[] = {{{pack}0}};",
                "    uint64_t synth = 0;",
                f"    {ret_ctype} ret;",
                f"    if (civ_call_entry(&{symbol}_sig, args, &synth)) {{",
                f"        ret = real({callargs_real or ''});",
                f"        ret = ({ret_ctype})civ_call_exit(&{symbol}_sig, (uint64_t)ret);",
                "    } else {",
                f"        ret = ({ret_ctype})synth;",
                "    }",
                "    civ_leave();",
                "    return ret;",
                "}",
                "",
            ]
    return "\n".join(lines) + "\n"


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("spec")
    parser.add_argument("-o", "--output", default="wrappers.c")
    args = parser.parse_args(argv)
    with open(args.spec) as fh:
        doc = json.load(fh)
    try:
        code = generate(doc)
    except UnsupportedSignature as e:
        print(f"UnsupportedSignature: {e}", file=sys.stderr)
        return 1
    with open(args.output, "w") as fh:
        fh.write(code)
    return 0


if __name__ == "__main__":
    sys.exit(main())

/* Runtime half of the preload shim: wire framing, session state, crash
 * capture.  Generated wrappers (wrappers.c) call into these entry points.
 *
 * Wire format (all little-endian), mirrored from the monitor:
 *   frame     := u32 payload_len, payload
 *   Ready     := 0x01 u32 run_id, u16 version, u16 word_bits
 *   CallEntry := 0x02 u32 crossing, str sym, u16 nvals {locus, u32 n, bytes},
 *                u16 nsnaps {u32 region, u32 n, bytes}
 *   CallExit  := 0x03 (same layout)
 *   Crash     := 0x06 u32 crossing, u8 kind, u8 has_addr, u64 addr,
 *                u16 nframes {str label, u64 offset}
 *   Done      := 0x07 u32 crossing
 *   commands  := 0x81 Proceed | 0x82 Alter u16 n {locus, u32 n, bytes}
 *              | 0x83 SkipCall u32 n bytes | 0x84 Terminate
 *   locus     := u8 kind: 1 Arg(u16 idx), 2 ReturnValue,
 *                5 SharedByte(u32 region, u32 offset)
 *   str       := u16 len, utf-8 bytes
 */
#ifndef CIV_SHIM_RUNTIME_H
#define CIV_SHIM_RUNTIME_H

#include <stdint.h>

/* per-argument marshaling classes */
#define CIV_ARG_SCALAR 0 /* integer value, no region */
#define CIV_ARG_PTR_FIXED 1 /* pointer, pointee size known: snapshot it */
#define CIV_ARG_PTR_TEXT 2 /* pointer to NUL-terminated text: scan length */
#define CIV_ARG_PTR_OPAQUE 3 /* pointer, size unknown: register, no bytes */

typedef struct {
    const char *symbol;
    int nargs;
    const uint8_t *arg_class;
    const uint8_t *arg_width;   /* value width on the wire, bytes */
    const uint32_t *pointee_len; /* CIV_ARG_PTR_FIXED only */
    int has_ret;
    uint8_t ret_width;
} civ_sig_t;

/* 1: instrumentation active and not reentered; pair with civ_leave() */
int civ_enter(void);
void civ_leave(void);

/* Emits CallEntry, applies the command.  Returns 1 to run the real call
 * (args possibly rewritten in place), 0 when the call is skipped (synth
 * filled with the synthetic return; no exit event will follow). */
int civ_call_entry(const civ_sig_t *sig, uint64_t *args, uint64_t *synth);

/* Emits CallExit, returns the (possibly rewritten) return value. */
uint64_t civ_call_exit(const civ_sig_t *sig, uint64_t ret);

#endif

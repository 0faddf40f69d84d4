/* Preload shim runtime: speaks the monitor protocol over two pipe fds
 * passed through CIVFUZZ_IN_FD / CIVFUZZ_OUT_FD, guards against reentrance,
 * and converts fatal signals into crash reports with best-effort stacks.
 *
 * Single-threaded targets only.  Without the env fds every wrapper falls
 * through to the real symbol untouched.
 */
#define _GNU_SOURCE
#include "shim_runtime.h"

#include <dlfcn.h>
#include <execinfo.h>
#include <libgen.h>
#include <signal.h>
#include <stdio.h>
#include <stdlib.h>
#include <string.h>
#include <ucontext.h>
#include <unistd.h>

#define PROTOCOL_VERSION 1
#define WORD_BITS 64
#define PAGE_SIZE 4096
#define MAX_FRAME (1 << 20)
#define MAX_REGIONS 16
#define TEXT_SNAPSHOT_CAP 4096

#define EV_READY 0x01
#define EV_CALL_ENTRY 0x02
#define EV_CALL_EXIT 0x03
#define EV_CRASH 0x06
#define EV_DONE 0x07
#define CMD_PROCEED 0x81
#define CMD_ALTER 0x82
#define CMD_SKIP 0x83
#define CMD_TERMINATE 0x84
#define LOCUS_ARG 1
#define LOCUS_RET 2
#define LOCUS_SHARED 5
#define KIND_READ 1
#define KIND_WRITE 2
#define KIND_NULL 5

static int g_in = -1, g_out = -1;
static int g_active = 0;
static int g_depth = 0;
static int g_done_sent = 0;
static uint32_t g_crossing = 0;
static uint32_t g_next_region = 0;

static struct {
    uint32_t id;
    uint8_t *base;
    uint32_t len; /* snapshot length; 0 for opaque */
} g_regions[MAX_REGIONS];
static int g_nregions = 0;

/* ---- framing -------------------------------------------------------- */

static int read_exact(void *buf, size_t n) {
    uint8_t *p = buf;
    while (n > 0) {
        ssize_t got = read(g_in, p, n);
        if (got <= 0)
            return -1;
        p += got;
        n -= (size_t)got;
    }
    return 0;
}

static int write_all(const void *buf, size_t n) {
    const uint8_t *p = buf;
    while (n > 0) {
        ssize_t put = write(g_out, p, n);
        if (put <= 0)
            return -1;
        p += put;
        n -= (size_t)put;
    }
    return 0;
}

/* growing payload writer */
static uint8_t g_buf[1 << 16];
static size_t g_len;

static void put_u8(uint8_t v) { g_buf[g_len++] = v; }
static void put_u16(uint16_t v) { memcpy(g_buf + g_len, &v, 2); g_len += 2; }
static void put_u32(uint32_t v) { memcpy(g_buf + g_len, &v, 4); g_len += 4; }
static void put_u64(uint64_t v) { memcpy(g_buf + g_len, &v, 8); g_len += 8; }
static void put_str(const char *s) {
    uint16_t n = (uint16_t)strlen(s);
    put_u16(n);
    memcpy(g_buf + g_len, s, n);
    g_len += n;
}
static void put_blob(const void *raw, uint32_t n) {
    put_u32(n);
    if (n) memcpy(g_buf + g_len, raw, n);
    g_len += n;
}

static int send_frame(void) {
    uint32_t n = (uint32_t)g_len;
    if (write_all(&n, 4) < 0)
        return -1;
    return write_all(g_buf, g_len);
}

/* ---- command handling ------------------------------------------------ */

static uint8_t g_cmd[1 << 16];
static size_t g_cmd_len;

static int recv_command(void) {
    uint32_t n;
    if (read_exact(&n, 4) < 0 || n > MAX_FRAME || n == 0)
        return -1;
    if (read_exact(g_cmd, n) < 0)
        return -1;
    g_cmd_len = n;
    return g_cmd[0];
}

static uint8_t *region_base(uint32_t id, uint32_t *len) {
    for (int i = 0; i < g_nregions; i++) {
        if (g_regions[i].id == id) {
            *len = g_regions[i].len;
            return g_regions[i].base;
        }
    }
    return NULL;
}

/* applies an Alter payload; returns 0 or -1 on malformed input */
static int apply_alter(const civ_sig_t *sig, uint64_t *args, uint64_t *ret) {
    size_t pos = 1;
    uint16_t count;
    if (g_cmd_len < 3)
        return -1;
    memcpy(&count, g_cmd + pos, 2);
    pos += 2;
    for (uint16_t i = 0; i < count; i++) {
        uint8_t kind = g_cmd[pos++];
        uint16_t index = 0;
        uint32_t region = 0, offset = 0;
        if (kind == LOCUS_ARG) {
            memcpy(&index, g_cmd + pos, 2);
            pos += 2;
        } else if (kind == LOCUS_SHARED) {
            memcpy(&region, g_cmd + pos, 4);
            memcpy(&offset, g_cmd + pos + 4, 4);
            pos += 8;
        }
        uint32_t blen;
        memcpy(&blen, g_cmd + pos, 4);
        pos += 4;
        const uint8_t *data = g_cmd + pos;
        pos += blen;
        if (pos > g_cmd_len)
            return -1;
        if (kind == LOCUS_ARG && args != NULL && index < sig->nargs) {
            uint64_t v = 0;
            memcpy(&v, data, blen > 8 ? 8 : blen);
            args[index] = v;
        } else if (kind == LOCUS_RET && ret != NULL) {
            uint64_t v = 0;
            memcpy(&v, data, blen > 8 ? 8 : blen);
            *ret = v;
        } else if (kind == LOCUS_SHARED) {
            uint32_t rlen;
            uint8_t *base = region_base(region, &rlen);
            if (base != NULL && offset + blen <= rlen)
                memcpy(base + offset, data, blen);
        }
    }
    return 0;
}

/* ---- region bookkeeping ---------------------------------------------- */

static void register_regions(const civ_sig_t *sig, const uint64_t *args) {
    g_nregions = 0;
    for (int i = 0; i < sig->nargs && g_nregions < MAX_REGIONS; i++) {
        uint8_t cls = sig->arg_class[i];
        if (cls == CIV_ARG_SCALAR)
            continue;
        uint8_t *base = (uint8_t *)(uintptr_t)args[i];
        if (base == NULL)
            continue;
        uint32_t len = 0;
        if (cls == CIV_ARG_PTR_FIXED) {
            len = sig->pointee_len[i];
        } else if (cls == CIV_ARG_PTR_TEXT) {
            /* NUL-scan, capped; the buffer is seconds old and ours to read */
            const char *s = (const char *)base;
            uint32_t n = 0;
            while (n < TEXT_SNAPSHOT_CAP && s[n] != '\0')
                n++;
            len = n < TEXT_SNAPSHOT_CAP ? n + 1 : TEXT_SNAPSHOT_CAP;
        }
        g_regions[g_nregions].id = g_next_region++;
        g_regions[g_nregions].base = base;
        g_regions[g_nregions].len = len;
        g_nregions++;
    }
}

static void put_snapshots(void) {
    put_u16((uint16_t)g_nregions);
    for (int i = 0; i < g_nregions; i++) {
        put_u32(g_regions[i].id);
        put_blob(g_regions[i].base, g_regions[i].len);
    }
}

/* ---- crossings -------------------------------------------------------- */

int civ_enter(void) {
    if (!g_active || g_depth > 0) {
        g_depth++;
        return 0;
    }
    g_depth++;
    return 1;
}

void civ_leave(void) { g_depth--; }

int civ_call_entry(const civ_sig_t *sig, uint64_t *args, uint64_t *synth) {
    register_regions(sig, args);
    g_len = 0;
    put_u8(EV_CALL_ENTRY);
    put_u32(g_crossing++);
    put_str(sig->symbol);
    put_u16((uint16_t)sig->nargs);
    for (int i = 0; i < sig->nargs; i++) {
        put_u8(LOCUS_ARG);
        put_u16((uint16_t)i);
        put_blob(&args[i], sig->arg_width[i]);
    }
    put_snapshots();
    if (send_frame() < 0) {
        g_active = 0;
        return 1;
    }
    switch (recv_command()) {
    case CMD_ALTER:
        apply_alter(sig, args, NULL);
        return 1;
    case CMD_SKIP: {
        uint32_t blen = 0;
        memcpy(&blen, g_cmd + 1, 4);
        uint64_t v = 0;
        memcpy(&v, g_cmd + 5, blen > 8 ? 8 : blen);
        *synth = v;
        g_nregions = 0; /* skipped call: window closes, no exit event */
        return 0;
    }
    case CMD_TERMINATE:
        _exit(0);
    case -1:
        g_active = 0;
        return 1;
    default: /* Proceed */
        return 1;
    }
}

uint64_t civ_call_exit(const civ_sig_t *sig, uint64_t ret) {
    g_len = 0;
    put_u8(EV_CALL_EXIT);
    put_u32(g_crossing++);
    put_str(sig->symbol);
    if (sig->has_ret) {
        put_u16(1);
        put_u8(LOCUS_RET);
        put_blob(&ret, sig->ret_width);
    } else {
        put_u16(0);
    }
    put_snapshots();
    g_nregions = 0;
    if (send_frame() < 0) {
        g_active = 0;
        return ret;
    }
    switch (recv_command()) {
    case CMD_ALTER:
        apply_alter(sig, NULL, &ret);
        return ret;
    case CMD_TERMINATE:
        _exit(0);
    default:
        return ret;
    }
}

/* ---- crash capture ----------------------------------------------------- */

static const char *module_of(void *pc, uint64_t *offset, const char **sym) {
    Dl_info info;
    *offset = (uint64_t)(uintptr_t)pc;
    *sym = NULL;
    if (!dladdr(pc, &info) || info.dli_fname == NULL)
        return NULL;
    if (info.dli_sname != NULL) {
        *sym = info.dli_sname;
        *offset = (uint64_t)((uintptr_t)pc - (uintptr_t)info.dli_saddr);
    } else {
        *offset = (uint64_t)((uintptr_t)pc - (uintptr_t)info.dli_fbase);
    }
    return info.dli_fname;
}

static int put_frame_for(void *pc, char *scratch, size_t scratch_len) {
    uint64_t offset;
    const char *sym;
    const char *fname = module_of(pc, &offset, &sym);
    if (fname == NULL)
        return -1;
    const char *base = strrchr(fname, '/');
    base = base ? base + 1 : fname;
    if (sym != NULL)
        snprintf(scratch, scratch_len, "%s:%s", base, sym);
    else
        snprintf(scratch, scratch_len, "%s", base);
    put_str(scratch);
    put_u64(offset);
    return 0;
}

static int is_shim_frame(void *pc) {
    Dl_info info;
    if (!dladdr(pc, &info) || info.dli_fname == NULL)
        return 0;
    return strstr(info.dli_fname, "libcivshim") != NULL;
}

static volatile sig_atomic_t g_in_handler = 0;

static void crash_handler(int signo, siginfo_t *si, void *uctx) {
    if (g_in_handler || !g_active)
        _exit(128 + signo);
    g_in_handler = 1;

    uint64_t addr = si != NULL ? (uint64_t)(uintptr_t)si->si_addr : 0;
    uint8_t kind = KIND_READ;
    if (signo == SIGSEGV || signo == SIGBUS) {
        if (addr < PAGE_SIZE) {
            kind = KIND_NULL;
        } else {
#if defined(__x86_64__)
            ucontext_t *uc = (ucontext_t *)uctx;
            /* page-fault error code bit 1: set on writes */
            if (uc != NULL && (uc->uc_mcontext.gregs[REG_ERR] & 2))
                kind = KIND_WRITE;
#endif
        }
    }

    void *pcs[32];
    int n = backtrace(pcs, 32);

    void *rip = NULL;
#if defined(__x86_64__)
    if (uctx != NULL)
        rip = (void *)(uintptr_t)((ucontext_t *)uctx)->uc_mcontext.gregs[REG_RIP];
#endif
    /* find where the interrupted code resumes in the unwind: first entry
     * after the handler and the kernel trampoline */
    int start = 0;
    while (start < n && is_shim_frame(pcs[start]))
        start++;
    if (start < n)
        start++; /* signal trampoline */

    g_len = 0;
    put_u8(EV_CRASH);
    put_u32(g_crossing);
    put_u8(kind);
    put_u8(1);
    put_u64(addr);
    size_t nframes_at = g_len;
    put_u16(0);
    uint16_t emitted = 0;
    char scratch[256];
    if (rip != NULL && put_frame_for(rip, scratch, sizeof scratch) == 0)
        emitted++;
    for (int i = start; i < n && emitted < 24; i++) {
        if (pcs[i] == rip)
            continue;
        if (put_frame_for(pcs[i], scratch, sizeof scratch) == 0)
            emitted++;
    }
    memcpy(g_buf + nframes_at, &emitted, 2);
    send_frame();
    recv_command(); /* Terminate */
    _exit(128 + signo);
}

static void workload_done(void) {
    if (!g_active || g_done_sent)
        return;
    g_done_sent = 1;
    g_len = 0;
    put_u8(EV_DONE);
    put_u32(g_crossing);
    send_frame();
    recv_command(); /* Terminate */
}

__attribute__((constructor)) static void civ_init(void) {
    const char *in_fd = getenv("CIVFUZZ_IN_FD");
    const char *out_fd = getenv("CIVFUZZ_OUT_FD");
    if (in_fd == NULL || out_fd == NULL)
        return; /* no monitor: stay transparent */
    g_in = atoi(in_fd);
    g_out = atoi(out_fd);

    struct sigaction sa;
    memset(&sa, 0, sizeof sa);
    sa.sa_sigaction = crash_handler;
    sa.sa_flags = SA_SIGINFO;
    sigaction(SIGSEGV, &sa, NULL);
    sigaction(SIGBUS, &sa, NULL);
    sigaction(SIGFPE, &sa, NULL);
    sigaction(SIGABRT, &sa, NULL);

    const char *run_id = getenv("CIVFUZZ_RUN_ID");
    g_len = 0;
    put_u8(EV_READY);
    put_u32(run_id != NULL ? (uint32_t)atoi(run_id) : 0);
    put_u16(PROTOCOL_VERSION);
    put_u16(WORD_BITS);
    if (send_frame() == 0) {
        g_active = 1;
        atexit(workload_done);
    }
}

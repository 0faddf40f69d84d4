/* generated by gen_wrappers.py; do not edit */
#define _GNU_SOURCE
#include "shim_runtime.h"
#include <dlfcn.h>
#include <stdint.h>

static const uint8_t toy_ping_class[] = {0};
static const uint8_t toy_ping_width[] = {4};
static const uint32_t toy_ping_plen[] = {0};
static const civ_sig_t toy_ping_sig = {
    "toy_ping", 1, toy_ping_class, toy_ping_width, toy_ping_plen,
    1, 4
};
int32_t toy_ping(int32_t a0) {
    static int32_t (*real)(int32_t);
    if (!real) real = (int32_t (*)(int32_t))(uintptr_t)dlsym(RTLD_NEXT, "toy_ping");
    if (!civ_enter()) {
        int32_t direct = real(a0);
        civ_leave();
        return direct;
    }
    uint64_t args[] = {(uint64_t)a0, 0};
    uint64_t synth = 0;
    int32_t ret;
    if (civ_call_entry(&toy_ping_sig, args, &synth)) {
        ret = real((int32_t)args[0]);
        ret = (int32_t)civ_call_exit(&toy_ping_sig, (uint64_t)ret);
    } else {
        ret = (int32_t)synth;
    }
    civ_leave();
    return ret;
}

static const uint8_t toy_field_class[] = {1};
static const uint8_t toy_field_width[] = {8};
static const uint32_t toy_field_plen[] = {16};
static const civ_sig_t toy_field_sig = {
    "toy_field", 1, toy_field_class, toy_field_width, toy_field_plen,
    1, 8
};
int64_t toy_field(void *a0) {
    static int64_t (*real)(void *);
    if (!real) real = (int64_t (*)(void *))(uintptr_t)dlsym(RTLD_NEXT, "toy_field");
    if (!civ_enter()) {
        int64_t direct = real(a0);
        civ_leave();
        return direct;
    }
    uint64_t args[] = {(uint64_t)(uintptr_t)a0, 0};
    uint64_t synth = 0;
    int64_t ret;
    if (civ_call_entry(&toy_field_sig, args, &synth)) {
        ret = real((void *)(uintptr_t)args[0]);
        ret = (int64_t)civ_call_exit(&toy_field_sig, (uint64_t)ret);
    } else {
        ret = (int64_t)synth;
    }
    civ_leave();
    return ret;
}

static const uint8_t toy_blit_class[] = {2, 0};
static const uint8_t toy_blit_width[] = {8, 4};
static const uint32_t toy_blit_plen[] = {0, 0};
static const civ_sig_t toy_blit_sig = {
    "toy_blit", 2, toy_blit_class, toy_blit_width, toy_blit_plen,
    0, 0
};
void toy_blit(void *a0, int32_t a1) {
    static void (*real)(void *, int32_t);
    if (!real) real = (void (*)(void *, int32_t))(uintptr_t)dlsym(RTLD_NEXT, "toy_blit");
    if (!civ_enter()) {
        real(a0, a1);
        civ_leave();
        return;
    }
    uint64_t args[] = {(uint64_t)(uintptr_t)a0, (uint64_t)a1, 0};
    uint64_t synth = 0;
    if (civ_call_entry(&toy_blit_sig, args, &synth)) {
        real((void *)(uintptr_t)args[0], (int32_t)args[1]);
        civ_call_exit(&toy_blit_sig, 0);
    }
    civ_leave();
}


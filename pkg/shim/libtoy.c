/* Tiny fixture library for end-to-end shim runs.
 *
 * Two deliberate holes: toy_field trusts its record pointer completely, and
 * toy_blit copies caller-specified lengths into a one-page staging buffer
 * backed by a guard page, so any oversized copy faults immediately and
 * deterministically instead of trampling the heap.
 */
#include "toy.h"

#include <string.h>
#include <sys/mman.h>

int32_t toy_ping(int32_t x) { return x * 2 + 1; }

int64_t toy_field(const toy_rec *rec) { return rec->b; }

static char *staging(void) {
    static char *buf;
    if (buf == NULL) {
        buf = mmap(NULL, 8192, PROT_READ | PROT_WRITE,
                   MAP_PRIVATE | MAP_ANONYMOUS, -1, 0);
        mprotect(buf + 4096, 4096, PROT_NONE);
    }
    return buf;
}

void toy_blit(const char *src, int32_t len) {
    memcpy(staging(), src, (size_t)(uint32_t)len);
}

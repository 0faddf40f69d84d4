/* Fixed workload exercising every libtoy entry point. */
#include "toy.h"

#include <stdio.h>
#include <string.h>

int main(void) {
    printf("ping=%d\n", toy_ping(20));
    toy_rec rec = {7, 42};
    printf("field=%lld\n", (long long)toy_field(&rec));
    char msg[32];
    strcpy(msg, "hello toy");
    toy_blit(msg, 10);
    printf("done\n");
    return 0;
}

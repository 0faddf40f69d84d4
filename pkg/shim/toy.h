#ifndef TOY_H
#define TOY_H

#include <stdint.h>

typedef struct {
    int64_t a;
    int64_t b;
} toy_rec;

int32_t toy_ping(int32_t x);
int64_t toy_field(const toy_rec *rec);
void toy_blit(const char *src, int32_t len);

#endif

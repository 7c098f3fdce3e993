#ifndef UTIL_H
#define UTIL_H

int parse_flags(const char *s);
void reset_state(void);

static inline int clamp01(int v)
{
    if (v < 0) { return 0; }
    if (v > 1) { return 1; }
    return v;
}

#endif

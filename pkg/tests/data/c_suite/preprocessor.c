#define OPEN {
#define CLOSE }
#include <stdio.h>

#ifdef USE_FAST
int fast_path(int x)
{
    return x << 1;
}
#else
int fast_path(int x)
{
    return x * 2;
}
#endif

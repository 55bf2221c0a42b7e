#include <stdlib.h>

struct dev { int *buf; };

void toy_unload(struct dev *d)
{
    free(d->buf);
    free(d->buf);
}

int toy_load(struct dev *d)
{
    d->buf = malloc(64);
    return d->buf ? 0 : -1;
}

/* Coverage replay harness: runs each input file through the driver once.
 * The index of the input about to run is printed first, so the caller can
 * resume after an input that kills the process.  Fatal signals flush the
 * gcov counters before exiting. */
#include <signal.h>
#include <stdint.h>
#include <stdio.h>
#include <stdlib.h>
#include <unistd.h>

int LLVMFuzzerTestOneInput(const uint8_t *data, size_t size);
extern void __gcov_dump(void);

static void on_fatal(int sig)
{
    __gcov_dump();
    _exit(128 + sig);
}

static unsigned char *slurp(const char *path, size_t *len)
{
    FILE *f = fopen(path, "rb");
    unsigned char *buf = NULL;
    size_t cap = 0, n = 0, got;
    if (f == NULL)
        return NULL;
    for (;;) {
        if (n == cap) {
            unsigned char *nb;
            cap = cap ? cap * 2 : 4096;
            nb = realloc(buf, cap);
            if (nb == NULL) {
                free(buf);
                fclose(f);
                return NULL;
            }
            buf = nb;
        }
        got = fread(buf + n, 1, cap - n, f);
        if (got == 0)
            break;
        n += got;
    }
    fclose(f);
    *len = n;
    return buf;
}

int main(int argc, char **argv)
{
    int sigs[] = {SIGSEGV, SIGABRT, SIGBUS, SIGFPE, SIGILL};
    size_t i;
    int k;
    for (i = 0; i < sizeof(sigs) / sizeof(sigs[0]); i++)
        signal(sigs[i], on_fatal);
    for (k = 1; k < argc; k++) {
        size_t len = 0;
        unsigned char *buf = slurp(argv[k], &len);
        printf("%d\n", k);
        fflush(stdout);
        if (buf == NULL)
            continue;
        LLVMFuzzerTestOneInput(buf, len);
        free(buf);
    }
    return 0;
}

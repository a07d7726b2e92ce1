typedef struct {
    const uint8_t *data;
    size_t size;
} masfuzz_input_t;

/* Fill dst from the tail of the input; zero-padded once it runs dry. */
static void masfuzz_take(masfuzz_input_t *in, void *dst, size_t n)
{
    memset(dst, 0, n);
    if (n > in->size)
        n = in->size;
    if (n)
        memcpy(dst, in->data + in->size - n, n);
    in->size -= n;
}

static char *masfuzz_rest(masfuzz_input_t *in, size_t *len)
{
    char *buf = malloc(in->size + 1);
    if (buf == NULL)
        return NULL;
    if (in->size)
        memcpy(buf, in->data, in->size);
    buf[in->size] = '\0';
    *len = in->size;
    return buf;
}

#ifndef MINIPLIST_H
#define MINIPLIST_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#ifndef MP_API
#define MP_API
#endif

typedef struct mp_node mp_node;

typedef enum {
    MP_ERR_SUCCESS = 0,
    MP_ERR_INVALID = -1,
    MP_ERR_NOMEM = -2
} mp_err_t;

typedef enum {
    MP_NONE = 0,
    MP_STRING,
    MP_REF
} mp_type;

/**
 * Parse a serialized property list.
 *
 * Documents start with the "MPL1" magic followed by a type byte and the
 * payload.  Examples: "MPL1Shello" is a string node and "MPL1Rworld" is a
 * reference node sharing its payload.
 *
 * @return a new node, or NULL when the input is not a property list.
 */
MP_API mp_node *mp_from_bytes(const char *data, uint32_t length);

/**
 * Copy a node.  Reference nodes share their payload with the original.
 */
MP_API mp_node *mp_copy(const mp_node *node);

/**
 * Render a node as text.  On success *out holds a heap buffer that the
 * caller must release with free().
 */
MP_API mp_err_t mp_to_text(const mp_node *node, char **out, uint32_t *out_len);

/**
 * Query the type of a node.  node must not be NULL.
 */
MP_API mp_type mp_get_type(const mp_node *node);

/** Release a node. */
MP_API void mp_free(mp_node *node);

#ifdef __cplusplus
}
#endif

#endif

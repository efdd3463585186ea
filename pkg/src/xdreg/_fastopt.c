/* Fused optimizer update kernels.
 *
 * Each kernel performs, per element and in this exact order, the same
 * sequence of IEEE-754 operations as the numpy fallback in
 * xdreg.training (one rounding per arithmetic op, no FMA contraction),
 * so results are bitwise identical between the two paths.  That
 * equivalence is asserted by the test suite whenever this module is
 * importable.
 *
 * Moments that have decayed below the smallest normal float are flushed
 * to exact zero: through the eps floor they no longer influence the
 * update, but as denormals they would stall the FPU.  The numpy
 * fallback applies the identical flush.
 */

#define PY_SSIZE_T_CLEAN
#include <Python.h>
#include <float.h>
#include <math.h>

#define ADAM_BODY(T, SQRT, FABS, TINY)                                       \
    for (Py_ssize_t i = 0; i < n; i++) {                                     \
        T gi = g[i];                                                         \
        T t1 = m[i] * b1;                                                    \
        T t2 = gi * c1mb1;                                                   \
        T mi = t1 + t2;                                                      \
        if (FABS(mi) < TINY)                                                 \
            mi = (T)0;                                                       \
        m[i] = mi;                                                           \
        T s1 = gi * gi;                                                      \
        T s2 = s1 * c1mb2;                                                   \
        T s3 = v[i] * b2;                                                    \
        T vi = s3 + s2;                                                      \
        if (vi < TINY)                                                       \
            vi = (T)0;                                                       \
        v[i] = vi;                                                           \
        T d = vi * ic2;                                                      \
        d = SQRT(d);                                                         \
        d = d + eps;                                                         \
        d = mi / d;                                                          \
        d = d * lr_ic1;                                                      \
        p[i] = p[i] - d;                                                     \
    }

static void adam_f32(float *p, const float *g, float *m, float *v,
                     Py_ssize_t n, float b1, float c1mb1, float b2,
                     float c1mb2, float ic2, float lr_ic1, float eps) {
    ADAM_BODY(float, sqrtf, fabsf, FLT_MIN)
}

static void adam_f64(double *p, const double *g, double *m, double *v,
                     Py_ssize_t n, double b1, double c1mb1, double b2,
                     double c1mb2, double ic2, double lr_ic1, double eps) {
    ADAM_BODY(double, sqrt, fabs, DBL_MIN)
}

/* Apply one Adam update to a (p, g, m, v) tuple of 1-D contiguous
 * buffers.  Returns 0 on success, -1 with an exception set on error. */
static int adam_apply(PyObject *po, PyObject *go, PyObject *mo, PyObject *vo,
                      double b1, double c1mb1, double b2, double c1mb2,
                      double ic2, double lr_ic1, double eps) {
    Py_buffer bufs[4];
    PyObject *objs[4] = {po, go, mo, vo};
    int held = 0;
    int status = -1;
    for (; held < 4; held++) {
        int flags = PyBUF_C_CONTIGUOUS | PyBUF_FORMAT;
        if (held != 1)
            flags |= PyBUF_WRITABLE;
        if (PyObject_GetBuffer(objs[held], &bufs[held], flags) != 0)
            goto done;
    }
    if (bufs[0].len != bufs[1].len || bufs[0].len != bufs[2].len ||
        bufs[0].len != bufs[3].len || bufs[0].itemsize != bufs[1].itemsize ||
        bufs[0].itemsize != bufs[2].itemsize ||
        bufs[0].itemsize != bufs[3].itemsize) {
        PyErr_SetString(PyExc_ValueError, "adam_step: buffer size mismatch");
    } else if (bufs[0].itemsize == 4) {
        adam_f32((float *)bufs[0].buf, (const float *)bufs[1].buf,
                 (float *)bufs[2].buf, (float *)bufs[3].buf, bufs[0].len / 4,
                 (float)b1, (float)c1mb1, (float)b2, (float)c1mb2, (float)ic2,
                 (float)lr_ic1, (float)eps);
        status = 0;
    } else if (bufs[0].itemsize == 8) {
        adam_f64((double *)bufs[0].buf, (const double *)bufs[1].buf,
                 (double *)bufs[2].buf, (double *)bufs[3].buf,
                 bufs[0].len / 8, b1, c1mb1, b2, c1mb2, ic2, lr_ic1, eps);
        status = 0;
    } else {
        PyErr_SetString(PyExc_TypeError, "adam_step: expected float32/float64");
    }
done:
    while (held > 0)
        PyBuffer_Release(&bufs[--held]);
    return status;
}

static PyObject *py_adam_step(PyObject *self, PyObject *args) {
    PyObject *po, *go, *mo, *vo;
    double b1, c1mb1, b2, c1mb2, ic2, lr_ic1, eps;
    if (!PyArg_ParseTuple(args, "OOOOddddddd", &po, &go, &mo, &vo, &b1,
                          &c1mb1, &b2, &c1mb2, &ic2, &lr_ic1, &eps))
        return NULL;
    if (adam_apply(po, go, mo, vo, b1, c1mb1, b2, c1mb2, ic2, lr_ic1, eps))
        return NULL;
    Py_RETURN_NONE;
}

static PyObject *py_adam_step_multi(PyObject *self, PyObject *args) {
    PyObject *ps, *gs, *ms, *vs;
    double b1, c1mb1, b2, c1mb2, ic2, lr_ic1, eps;
    if (!PyArg_ParseTuple(args, "OOOOddddddd", &ps, &gs, &ms, &vs, &b1,
                          &c1mb1, &b2, &c1mb2, &ic2, &lr_ic1, &eps))
        return NULL;
    PyObject *fast[4] = {NULL, NULL, NULL, NULL};
    PyObject *seqs[4] = {ps, gs, ms, vs};
    PyObject *result = NULL;
    for (int k = 0; k < 4; k++) {
        fast[k] = PySequence_Fast(seqs[k], "adam_step_multi: expected sequences");
        if (fast[k] == NULL)
            goto done;
    }
    Py_ssize_t count = PySequence_Fast_GET_SIZE(fast[0]);
    for (int k = 1; k < 4; k++) {
        if (PySequence_Fast_GET_SIZE(fast[k]) != count) {
            PyErr_SetString(PyExc_ValueError, "adam_step_multi: length mismatch");
            goto done;
        }
    }
    for (Py_ssize_t i = 0; i < count; i++) {
        if (adam_apply(PySequence_Fast_GET_ITEM(fast[0], i),
                       PySequence_Fast_GET_ITEM(fast[1], i),
                       PySequence_Fast_GET_ITEM(fast[2], i),
                       PySequence_Fast_GET_ITEM(fast[3], i), b1, c1mb1, b2,
                       c1mb2, ic2, lr_ic1, eps))
            goto done;
    }
    result = Py_None;
    Py_INCREF(result);
done:
    for (int k = 0; k < 4; k++)
        Py_XDECREF(fast[k]);
    return result;
}

static PyMethodDef methods[] = {
    {"adam_step", py_adam_step, METH_VARARGS,
     "adam_step(p, g, m, v, b1, c1mb1, b2, c1mb2, ic2, lr_ic1, eps)\n"
     "In-place fused Adam update on contiguous 1-D float32/float64 buffers."},
    {"adam_step_multi", py_adam_step_multi, METH_VARARGS,
     "adam_step_multi(ps, gs, ms, vs, ...scalars)\n"
     "adam_step applied across parallel sequences of buffers in one call."},
    {NULL, NULL, 0, NULL},
};

static struct PyModuleDef moduledef = {
    PyModuleDef_HEAD_INIT, "_fastopt", NULL, -1, methods,
};

PyMODINIT_FUNC PyInit__fastopt(void) { return PyModule_Create(&moduledef); }

/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_get_inversionresult_ceFirst: (a: number) => number;
export const __wbg_get_inversionresult_ceLast: (a: number) => number;
export const __wbg_get_inversionresult_confidence: (a: number) => number;
export const __wbg_inversionresult_free: (a: number, b: number) => void;
export const __wbg_inverter_free: (a: number, b: number) => void;
export const __wbg_set_inversionresult_ceFirst: (a: number, b: number) => void;
export const __wbg_set_inversionresult_ceLast: (a: number, b: number) => void;
export const __wbg_set_inversionresult_confidence: (a: number, b: number) => void;
export const boundCurves: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number, i: number) => [number, number, number, number];
export const inversionresult_active: (a: number) => [number, number];
export const inversionresult_attention: (a: number) => [number, number];
export const inversionresult_grid: (a: number) => number;
export const inversionresult_pixels: (a: number) => [number, number];
export const inversionresult_real: (a: number) => [number, number];
export const inversionresult_size: (a: number) => number;
export const inverter_invert: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number];
export const inverter_new: (a: number) => [number, number, number];
export const partitionCounts: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __wbindgen_start: () => void;

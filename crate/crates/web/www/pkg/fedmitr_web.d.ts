/* tslint:disable */
/* eslint-disable */

export class InversionResult {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    ceFirst: number;
    ceLast: number;
    confidence: number;
    readonly active: Uint8Array;
    readonly attention: Float64Array;
    readonly grid: number;
    readonly pixels: Float64Array;
    readonly real: Float64Array;
    readonly size: number;
}

export class Inverter {
    free(): void;
    [Symbol.dispose](): void;
    invert(label: number, mask_ratio: number, iterations: number, lr: number, seed: number): InversionResult;
    /**
     * Trains the demo client; takes a second or two.
     */
    constructor(seed: number);
}

/**
 * Flattened `[L, β, bound]` triples.
 */
export function boundCurves(l_max: number, points: number, mu: number, c: number, t: number, n: number, m: number, delta: number, r_emp: number): Float64Array;

/**
 * Row-major `[n_clients, classes]` sample counts.
 */
export function partitionCounts(kind: string, param: number, n_clients: number, classes: number, per_class: number, seed: number): Uint32Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_get_inversionresult_ceFirst: (a: number) => number;
    readonly __wbg_get_inversionresult_ceLast: (a: number) => number;
    readonly __wbg_get_inversionresult_confidence: (a: number) => number;
    readonly __wbg_inversionresult_free: (a: number, b: number) => void;
    readonly __wbg_inverter_free: (a: number, b: number) => void;
    readonly __wbg_set_inversionresult_ceFirst: (a: number, b: number) => void;
    readonly __wbg_set_inversionresult_ceLast: (a: number, b: number) => void;
    readonly __wbg_set_inversionresult_confidence: (a: number, b: number) => void;
    readonly boundCurves: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number, i: number) => [number, number, number, number];
    readonly inversionresult_active: (a: number) => [number, number];
    readonly inversionresult_attention: (a: number) => [number, number];
    readonly inversionresult_grid: (a: number) => number;
    readonly inversionresult_pixels: (a: number) => [number, number];
    readonly inversionresult_real: (a: number) => [number, number];
    readonly inversionresult_size: (a: number) => number;
    readonly inverter_invert: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number];
    readonly inverter_new: (a: number) => [number, number, number];
    readonly partitionCounts: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;

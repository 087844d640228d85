/* tslint:disable */
/* eslint-disable */

/**
 * A model held by the page.
 */
export class Demo {
    free(): void;
    [Symbol.dispose](): void;
    describe(): string;
    /**
     * Model from a checkpoint written by `crl train`.
     */
    static fromCheckpoint(bytes: Uint8Array): Demo;
    /**
     * Freshly initialized `mnist-arc1` model.
     */
    constructor(seed: number);
    reconstruct(pixels: Float64Array, keep_left: boolean): Float64Array;
}

export function plantedCca(n: number, d: number, rho: Float64Array, noise: number, seed: number): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demo_free: (a: number, b: number) => void;
    readonly demo_describe: (a: number) => [number, number];
    readonly demo_fromCheckpoint: (a: number, b: number) => [number, number, number];
    readonly demo_new: (a: number) => [number, number, number];
    readonly demo_reconstruct: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly plantedCca: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __externref_table_dealloc: (a: number) => void;
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
